"""Count tables and the two rival correlation estimators.

``GILL`` mode is the standard dichotomic estimate: outcomes map to +/-1
(detected -> +1) and each setting pair gets ``(N_eq - N_ne) / N``.

``MALUS`` mode never looks at coincidences. Each side tallies, per setting
label and per incoming pulse axis, how often its detector fired. The square
roots of those firing rates estimate |cos theta| (axis 0) and |sin theta|
(axis pi/2) of the local polarizer angle; signs come from the nominal local
angle. Only afterwards are the two sides' factors combined through the
angle-difference identities into cos^2(delta) - sin^2(delta).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from eprsim.core import HALF_PI, EprSimError, ExperimentConfig, SourceMode, TrialRecord

PAIRS = ((1, 1), (1, 2), (2, 1), (2, 2))
AXES = (0.0, HALF_PI)


class AnalysisError(EprSimError):
    pass


class UndefinedCorrelationError(AnalysisError):
    """A correlation was requested for a setting pair with no trials."""


class InsufficientDataError(AnalysisError):
    """A side-count cell needed for a factor estimate has no exposures."""


class Mode(enum.Enum):
    GILL = "gill"
    MALUS = "malus"


class SideName(enum.Enum):
    LEFT = "LEFT"
    RIGHT = "RIGHT"


@dataclass
class PairTally:
    n_equal: int = 0
    n_unequal: int = 0

    @property
    def n_total(self) -> int:
        return self.n_equal + self.n_unequal


@dataclass
class PairCounts:
    tallies: dict[tuple[int, int], PairTally] = field(
        default_factory=lambda: {p: PairTally() for p in PAIRS}
    )

    def __getitem__(self, pair: tuple[int, int]) -> PairTally:
        return self.tallies[pair]

    @property
    def total(self) -> int:
        return sum(t.n_total for t in self.tallies.values())


@dataclass
class Cell:
    detections: int = 0
    exposures: int = 0


@dataclass
class SideCounts:
    """Detector tallies keyed by (setting label, incoming pulse axis)."""

    side: SideName
    cells: dict[tuple[int, float], Cell] = field(
        default_factory=lambda: {(lab, ax): Cell() for lab in (1, 2) for ax in AXES}
    )

    def cell(self, label: int, axis: float) -> Cell:
        return self.cells[(int(label), axis)]

    @property
    def total_exposures(self) -> int:
        return sum(c.exposures for c in self.cells.values())


@dataclass(frozen=True)
class FactorEstimate:
    cos_est: float
    sin_est: float
    exposures_used: int = 0


@dataclass(frozen=True)
class CurvePoint:
    trial_index: int
    S: float
    kappa: dict[tuple[int, int], float]


@dataclass
class CorrelationReport:
    """Full-log correlations plus the running curve.

    ``kappa`` only holds pairs whose correlation is defined; the others are
    listed in ``undefined`` and ``contrast_S`` is then None.
    """

    mode: Mode
    kappa: dict[tuple[int, int], float]
    contrast_S: Optional[float]
    running_curve: list[CurvePoint] = field(default_factory=list)
    undefined: tuple[tuple[int, int], ...] = ()


def tally_pairs(log: Sequence[TrialRecord]) -> PairCounts:
    counts = PairCounts()
    for rec in log:
        tally = counts.tallies[(int(rec.a_label), int(rec.b_label))]
        if rec.x_detected == rec.y_detected:
            tally.n_equal += 1
        else:
            tally.n_unequal += 1
    return counts


def _gill_ratio(n_equal, n_total):
    return (n_equal - (n_total - n_equal)) / n_total


def kappa_gill(counts: PairCounts, pair: tuple[int, int]) -> float:
    tally = counts[pair]
    if tally.n_total == 0:
        raise UndefinedCorrelationError(f"no trials for setting pair {pair}")
    return _gill_ratio(tally.n_equal, tally.n_total)


def chsh(kappa: Mapping[tuple[int, int], float]) -> float:
    """S = k12 + k11 + k21 - k22."""
    missing = [p for p in PAIRS if p not in kappa]
    if missing:
        raise AnalysisError(f"missing correlations for pairs {missing}")
    return kappa[(1, 2)] + kappa[(1, 1)] + kappa[(2, 1)] - kappa[(2, 2)]


def tally_sides(log: Sequence[TrialRecord], config: ExperimentConfig) -> tuple[SideCounts, SideCounts]:
    # The config is accepted so callers bind counts to an angle table;
    # the tallies themselves depend on labels and axes only.
    del config
    left, right = SideCounts(SideName.LEFT), SideCounts(SideName.RIGHT)
    for rec in log:
        lc = left.cells[(int(rec.a_label), rec.mode.left_axis)]
        lc.exposures += 1
        lc.detections += rec.x_detected
        rc = right.cells[(int(rec.b_label), rec.mode.right_axis)]
        rc.exposures += 1
        rc.detections += rec.y_detected
    return left, right


def _sign(x: float) -> float:
    return math.copysign(1.0, x)


def factors_from_ratios(ratio_axis0, ratio_axis90, nominal_angle: float):
    """Signed |cos|, |sin| estimates from firing rates on the two pulse axes.

    Works elementwise on arrays as well as on floats.
    """
    cos_est = _sign(math.cos(nominal_angle)) * np.sqrt(ratio_axis0)
    sin_est = _sign(math.sin(nominal_angle)) * np.sqrt(ratio_axis90)
    return cos_est, sin_est


def estimate_factors(side_counts: SideCounts, label: int, nominal_angle: float) -> FactorEstimate:
    c0 = side_counts.cell(label, 0.0)
    c90 = side_counts.cell(label, HALF_PI)
    if c0.exposures == 0 or c90.exposures == 0:
        raise InsufficientDataError(
            f"{side_counts.side.value} label {label}: no exposures on "
            + ("axis 0" if c0.exposures == 0 else "axis pi/2")
        )
    cos_est, sin_est = factors_from_ratios(
        c0.detections / c0.exposures, c90.detections / c90.exposures, nominal_angle
    )
    return FactorEstimate(float(cos_est), float(sin_est), c0.exposures + c90.exposures)


def _malus_combine(cos_l, sin_l, cos_r, sin_r):
    cos_d = cos_r * cos_l + sin_r * sin_l
    sin_d = sin_r * cos_l - cos_r * sin_l
    return cos_d * cos_d - sin_d * sin_d


def kappa_malus(left: FactorEstimate, right: FactorEstimate) -> float:
    return float(_malus_combine(left.cos_est, left.sin_est, right.cos_est, right.sin_est))


def analyze(log: Sequence[TrialRecord], config: ExperimentConfig, mode: Mode) -> CorrelationReport:
    """Full-log correlations for every defined pair, without a curve."""
    kappa: dict[tuple[int, int], float] = {}
    undefined = []
    if mode is Mode.GILL:
        counts = tally_pairs(log)
        for pair in PAIRS:
            try:
                kappa[pair] = kappa_gill(counts, pair)
            except UndefinedCorrelationError:
                undefined.append(pair)
    else:
        left, right = tally_sides(log, config)
        for a, b in PAIRS:
            try:
                fl = estimate_factors(left, a, config.left_angle(a))
                fr = estimate_factors(right, b, config.right_angle(b))
            except InsufficientDataError:
                undefined.append((a, b))
                continue
            kappa[(a, b)] = kappa_malus(fl, fr)
    contrast = None if undefined else chsh(kappa)
    return CorrelationReport(mode, kappa, contrast, [], tuple(undefined))


def _log_arrays(log: Sequence[TrialRecord]):
    a = np.fromiter((int(r.a_label) for r in log), dtype=np.int8, count=len(log))
    b = np.fromiter((int(r.b_label) for r in log), dtype=np.int8, count=len(log))
    vh = np.fromiter((r.mode is SourceMode.VH for r in log), dtype=bool, count=len(log))
    x = np.fromiter((r.x_detected for r in log), dtype=bool, count=len(log))
    y = np.fromiter((r.y_detected for r in log), dtype=bool, count=len(log))
    return a, b, vh, x, y


def running_report(
    log: Sequence[TrialRecord],
    config: ExperimentConfig,
    mode: Mode,
    stride: int = 1,
) -> CorrelationReport:
    """Correlations on every prefix whose length is a multiple of ``stride``.

    Prefixes where some correlation is undefined are skipped. ``kappa`` and
    ``contrast_S`` of the report describe the full log.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    report = analyze(log, config, mode)
    T = len(log)
    ends = np.arange(stride, T + 1, stride)
    if len(ends) == 0:
        return report
    idx = ends - 1
    a, b, vh, x, y = _log_arrays(log)

    curves: dict[tuple[int, int], np.ndarray] = {}
    valid = np.ones(len(ends), dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        if mode is Mode.GILL:
            equal = x == y
            for pair in PAIRS:
                sel = (a == pair[0]) & (b == pair[1])
                n_total = np.cumsum(sel)[idx]
                n_equal = np.cumsum(sel & equal)[idx]
                valid &= n_total > 0
                curves[pair] = _gill_ratio(n_equal, n_total)
        else:
            factors = {}
            # left station sees axis 0 on VH trials, right station on HV trials
            for side, labels, fired, axis0, angle_of in (
                ("L", a, x, vh, config.left_angle),
                ("R", b, y, ~vh, config.right_angle),
            ):
                for lab in (1, 2):
                    ratios = []
                    for on_axis in (axis0, ~axis0):
                        sel = (labels == lab) & on_axis
                        exposures = np.cumsum(sel)[idx]
                        detections = np.cumsum(sel & fired)[idx]
                        valid &= exposures > 0
                        ratios.append(detections / exposures)
                    factors[(side, lab)] = factors_from_ratios(ratios[0], ratios[1], angle_of(lab))
            for la, lb in PAIRS:
                cl, sl = factors[("L", la)]
                cr, sr = factors[("R", lb)]
                curves[(la, lb)] = _malus_combine(cl, sl, cr, sr)

    S = curves[(1, 2)] + curves[(1, 1)] + curves[(2, 1)] - curves[(2, 2)]
    for i in np.flatnonzero(valid):
        report.running_curve.append(
            CurvePoint(int(ends[i]), float(S[i]), {p: float(curves[p][i]) for p in PAIRS})
        )
    return report


def no_signaling_gap(log: Sequence[TrialRecord]) -> tuple[float, float]:
    """X's firing rate split by B's label: (difference, its standard error)."""
    _, b, _, x, _ = _log_arrays(log)
    rates, variances = [], []
    for lab in (1, 2):
        sel = x[b == lab]
        if sel.size == 0:
            raise InsufficientDataError(f"no trials with B label {lab}")
        p = sel.mean()
        rates.append(p)
        variances.append(p * (1 - p) / sel.size)
    return float(rates[0] - rates[1]), float(math.sqrt(variances[0] + variances[1]))
