"""Text file formats: trial logs, running-curve CSVs, configs, disclosures.

A trial log is line-delimited JSON. The first line is a header::

    {"format":"eprsim-trial-log","version":"1","records":T,"digest":"...","config":{...}}

and line ``n + 2`` holds trial ``n`` as a flat object::

    {"trial":0,"mode":"VH","a":1,"b":2,"x":1,"y":0}

Serialization is canonical (fixed key order, no whitespace, shortest
round-trip float repr), so re-serializing a parsed log is byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import io as _stdio
import json
import os
from contextlib import contextmanager
from typing import IO, Iterable, Iterator, Sequence, Union

from eprsim.analysis import PAIRS, CorrelationReport, CurvePoint
from eprsim.core import ConfigError, EprSimError, ExperimentConfig, SettingLabel, SourceMode, TrialRecord

FORMAT_NAME = "eprsim-trial-log"
FORMAT_VERSION = "1"
RECORD_KEYS = ("trial", "mode", "a", "b", "x", "y")
CURVE_COLUMNS = ("trial_index", "S", "kappa_11", "kappa_12", "kappa_21", "kappa_22")

PathOrFile = Union[str, os.PathLike, IO[str]]


class LogFormatError(EprSimError):
    """Base class for trial-log parse failures."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class UnknownVersionError(LogFormatError):
    pass


class MalformedLineError(LogFormatError):
    pass


class FieldDomainError(MalformedLineError):
    """A field is present and well-typed syntax but holds an illegal value."""


class NonMonotoneIndexError(LogFormatError):
    pass


class DigestMismatchError(LogFormatError):
    pass


class TruncatedLogError(LogFormatError):
    pass


class LogWriteError(EprSimError):
    pass


def dump_line(obj: dict) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


def config_digest(config: ExperimentConfig) -> str:
    canon = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("ascii")).hexdigest()


def record_fields(rec: TrialRecord) -> dict:
    return {
        "trial": rec.index,
        "mode": rec.mode.value,
        "a": int(rec.a_label),
        "b": int(rec.b_label),
        "x": int(rec.x_detected),
        "y": int(rec.y_detected),
    }


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def record_from_fields(obj: dict, line: int | None = None) -> TrialRecord:
    """Validate a flat record object and build a TrialRecord from it."""
    if not isinstance(obj, dict):
        raise MalformedLineError("record is not a JSON object", line)
    missing = [k for k in RECORD_KEYS if k not in obj]
    if missing:
        raise MalformedLineError(f"missing field(s) {missing}", line)
    extra = sorted(set(obj) - set(RECORD_KEYS))
    if extra:
        raise MalformedLineError(f"unexpected field(s) {extra}", line)
    if not _is_int(obj["trial"]) or obj["trial"] < 0:
        raise FieldDomainError(f"trial must be a non-negative integer, got {obj['trial']!r}", line)
    if obj["mode"] not in ("VH", "HV"):
        raise FieldDomainError(f"mode must be VH or HV, got {obj['mode']!r}", line)
    for key, allowed in (("a", (1, 2)), ("b", (1, 2)), ("x", (0, 1)), ("y", (0, 1))):
        if not _is_int(obj[key]) or obj[key] not in allowed:
            raise FieldDomainError(f"{key} must be one of {allowed}, got {obj[key]!r}", line)
    return TrialRecord(
        index=obj["trial"],
        mode=SourceMode(obj["mode"]),
        a_label=SettingLabel(obj["a"]),
        b_label=SettingLabel(obj["b"]),
        x_detected=bool(obj["x"]),
        y_detected=bool(obj["y"]),
    )


def _header(log: Sequence[TrialRecord], config: ExperimentConfig) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "records": len(log),
        "digest": config_digest(config),
        "config": config.to_dict(),
    }


def iter_log_lines(log: Sequence[TrialRecord], config: ExperimentConfig) -> Iterator[str]:
    yield dump_line(_header(log, config)) + "\n"
    for rec in log:
        yield dump_line(record_fields(rec)) + "\n"


def format_log(log: Sequence[TrialRecord], config: ExperimentConfig) -> str:
    return "".join(iter_log_lines(log, config))


@contextmanager
def _open(target: PathOrFile, mode: str):
    if isinstance(target, (str, os.PathLike)):
        with open(target, mode, encoding="ascii", newline="") as fh:
            yield fh
    else:
        yield target


def write_log(log: Sequence[TrialRecord], config: ExperimentConfig, destination: PathOrFile) -> None:
    for n, rec in enumerate(log):
        if rec.index != n:
            raise ValueError(f"log position {n} holds trial {rec.index}")
    try:
        with _open(destination, "w") as fh:
            fh.writelines(iter_log_lines(log, config))
    except OSError as exc:
        raise LogWriteError(f"cannot write trial log to {destination!r}: {exc}") from exc


def _parse_json(text: str, line: int):
    try:
        return json.loads(text)
    except ValueError as exc:
        raise MalformedLineError(f"not valid JSON ({exc.args[0]})", line) from None


def parse_log(lines: Iterable[str]) -> tuple[ExperimentConfig, list[TrialRecord]]:
    it = iter(lines)
    try:
        first = next(it)
    except StopIteration:
        raise TruncatedLogError("empty file: no header") from None
    if not first.endswith("\n"):
        raise TruncatedLogError("header line is not newline-terminated", 1)
    header = _parse_json(first, 1)
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise MalformedLineError("not an eprsim trial log header", 1)
    if header.get("version") != FORMAT_VERSION:
        raise UnknownVersionError(f"unsupported log version {header.get('version')!r}", 1)
    try:
        config = ExperimentConfig.from_dict(header["config"])
    except (KeyError, ConfigError) as exc:
        raise MalformedLineError(f"bad config in header: {exc}", 1) from None
    if header.get("digest") != config_digest(config):
        raise DigestMismatchError("header digest does not match its config", 1)
    expected = header.get("records")
    if not _is_int(expected) or expected < 0:
        raise MalformedLineError("header record count missing or invalid", 1)

    records: list[TrialRecord] = []
    for lineno, text in enumerate(it, start=2):
        if not text.endswith("\n"):
            raise TruncatedLogError("final line is not newline-terminated", lineno)
        rec = record_from_fields(_parse_json(text, lineno), lineno)
        n = len(records)
        if rec.index != n:
            if rec.index < n:
                raise NonMonotoneIndexError(f"trial {rec.index} does not follow trial {n - 1}", lineno)
            raise MalformedLineError(f"expected trial {n}, got {rec.index}", lineno)
        records.append(rec)
    if len(records) != expected:
        raise TruncatedLogError(f"header announces {expected} records, found {len(records)}")
    return config, records


def read_log(source: PathOrFile) -> tuple[ExperimentConfig, list[TrialRecord]]:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "r", encoding="ascii", newline="") as fh:
            return parse_log(fh)
    return parse_log(source)


def loads_log(text: str) -> tuple[ExperimentConfig, list[TrialRecord]]:
    return parse_log(_stdio.StringIO(text, newline=""))


def _fixed(v: float) -> str:
    return f"{v:.10f}"


def write_curve(report: CorrelationReport, destination: PathOrFile) -> None:
    """Running curve as CSV in fixed decimal notation."""
    with _open(destination, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_COLUMNS)
        for pt in report.running_curve:
            w.writerow([pt.trial_index, _fixed(pt.S), *(_fixed(pt.kappa[p]) for p in PAIRS)])


def read_curve(source: PathOrFile) -> list[CurvePoint]:
    with _open(source, "r") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CURVE_COLUMNS:
        raise MalformedLineError("missing or wrong curve header", 1)
    points = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(CURVE_COLUMNS):
            raise MalformedLineError(f"expected {len(CURVE_COLUMNS)} columns", lineno)
        try:
            idx = int(row[0])
            S, *kappas = (float(v) for v in row[1:])
        except ValueError as exc:
            raise MalformedLineError(str(exc), lineno) from None
        if points and idx <= points[-1].trial_index:
            raise NonMonotoneIndexError("trial_index not strictly increasing", lineno)
        points.append(CurvePoint(idx, S, dict(zip(PAIRS, kappas))))
    return points


def write_config(config: ExperimentConfig, destination: PathOrFile) -> None:
    with _open(destination, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2)
        fh.write("\n")


def read_config(source: PathOrFile) -> ExperimentConfig:
    with _open(source, "r") as fh:
        try:
            data = json.load(fh)
        except ValueError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return ExperimentConfig.from_dict(data)


def write_disclosures(labels: Sequence[int], destination: PathOrFile) -> None:
    """A randomizer's disclosed labels, one ``{"trial":n,"label":l}`` per line."""
    with _open(destination, "w") as fh:
        for n, label in enumerate(labels):
            fh.write(dump_line({"trial": n, "label": int(label)}) + "\n")


def read_disclosures(source: PathOrFile) -> list[SettingLabel]:
    labels: list[SettingLabel] = []
    with _open(source, "r") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.endswith("\n"):
                raise TruncatedLogError("final line is not newline-terminated", lineno)
            obj = _parse_json(text, lineno)
            if not isinstance(obj, dict) or set(obj) != {"trial", "label"}:
                raise MalformedLineError("expected an object with keys trial, label", lineno)
            if obj["trial"] != len(labels) or not _is_int(obj["trial"]):
                raise NonMonotoneIndexError(f"expected trial {len(labels)}, got {obj['trial']!r}", lineno)
            if not _is_int(obj["label"]) or obj["label"] not in (1, 2):
                raise FieldDomainError(f"label must be 1 or 2, got {obj['label']!r}", lineno)
            labels.append(SettingLabel(obj["label"]))
    return labels
