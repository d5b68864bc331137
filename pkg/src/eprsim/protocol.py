"""The five computers of the locality protocol, plus collector and referee.

Each role is a small state machine that only *receives* the messages its
inbound edges carry and only *returns* the messages for its outbound edges:

    source O     -> station X, station Y     (SourcePulseMsg)
    randomizer A -> station X                (SettingMsg)
    randomizer B -> station Y                (SettingMsg)
    stations     -> collector                (OutcomeMsg)
    A, B, collector -> referee               (disclosed labels, log)

A station object holds no reference to the other station or to the other
randomizer, so the one-way topology is a property of the types.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

from eprsim.core import (
    HALF_PI,
    DetectorRule,
    EprSimError,
    ExperimentConfig,
    RandomStream,
    Role,
    SettingLabel,
    SourceMode,
    TrialRecord,
    derive_stream,
    malus_intensity,
)


class ProtocolError(EprSimError):
    """A role received a message it must not accept."""


class Side(enum.Enum):
    LEFT = "X"
    RIGHT = "Y"


@dataclass(frozen=True, slots=True)
class SourcePulseMsg:
    trial: int
    pulse_axis: float


@dataclass(frozen=True, slots=True)
class SettingMsg:
    trial: int
    label: SettingLabel


@dataclass(frozen=True, slots=True)
class OutcomeMsg:
    """A station's report for one trial.

    Besides the detection flag, the station reports the label and pulse axis it
    was handed; the collector needs them to assemble a full TrialRecord, and the
    referee later checks the labels against the randomizers' disclosures.
    """

    trial: int
    side: Side
    label: SettingLabel
    pulse_axis: float
    detected: bool


# (setting angle, pulse axis, own stream, past (a, b) label pairs) -> detected
StationStrategy = Callable[[float, float, RandomStream, Sequence[tuple[int, int]]], bool]


@dataclass(frozen=True)
class MalusPoissonStrategy:
    """Fire iff a fresh uniform draw falls below cos^2(setting - axis).

    Exactly one draw is consumed per trial, whatever the intensity.
    """

    rule: DetectorRule = DetectorRule.STRICT_LESS

    def __call__(self, setting, pulse_axis, stream, history=()):
        return self.rule.fires(stream.uniform(), malus_intensity(setting, pulse_axis))


@dataclass(frozen=True)
class ThresholdStrategy:
    """Deterministic local baseline: fire iff the Malus intensity exceeds ``level``."""

    level: float = 0.5

    def __call__(self, setting, pulse_axis, stream, history=()):
        return malus_intensity(setting, pulse_axis) > self.level


def source_step(stream: RandomStream, trial: int) -> tuple[SourcePulseMsg, SourcePulseMsg, SourceMode]:
    """Pick VH or HV with equal probability; return (msg for X, msg for Y, mode)."""
    mode = SourceMode.VH if stream.uniform() < 0.5 else SourceMode.HV
    return SourcePulseMsg(trial, mode.left_axis), SourcePulseMsg(trial, mode.right_axis), mode


def randomizer_step(stream: RandomStream, trial: int) -> SettingMsg:
    """A fair coin toss between labels 1 and 2."""
    label = SettingLabel.ONE if stream.uniform() < 0.5 else SettingLabel.TWO
    return SettingMsg(trial, label)


def station_step(
    strategy: StationStrategy,
    setting: float,
    pulse_axis: float,
    stream: RandomStream,
    history: Sequence[tuple[int, int]] = (),
) -> bool:
    return bool(strategy(setting, pulse_axis, stream, history))


class Source:
    """Computer O."""

    def __init__(self, stream: RandomStream):
        self.stream = stream
        self._next = 0

    def step(self) -> tuple[SourcePulseMsg, SourcePulseMsg, SourceMode]:
        out = source_step(self.stream, self._next)
        self._next += 1
        return out


class Randomizer:
    """Computer A or B: fair coin labels, privately remembered for disclosure."""

    def __init__(self, stream: RandomStream):
        self.stream = stream
        self._emitted: list[SettingLabel] = []

    def step(self) -> SettingMsg:
        msg = randomizer_step(self.stream, len(self._emitted))
        self._emitted.append(msg.label)
        return msg

    def disclose(self) -> list[SettingLabel]:
        return list(self._emitted)


class Station:
    """Computer X or Y.

    Buffers whichever of the pulse and setting arrives first and emits an
    OutcomeMsg once both inputs for a trial are present. Trials must arrive in
    order on each inbound channel.
    """

    def __init__(
        self,
        side: Side,
        angles: tuple[float, float],
        strategy: StationStrategy,
        stream: RandomStream,
    ):
        self.side = side
        self.angles = angles
        self.strategy = strategy
        self.stream = stream
        self._pulses: dict[int, SourcePulseMsg] = {}
        self._settings: dict[int, SettingMsg] = {}
        self._next_pulse = 0
        self._next_setting = 0
        self._next_outcome = 0

    def receive_pulse(self, msg: SourcePulseMsg) -> Optional[OutcomeMsg]:
        if msg.trial != self._next_pulse:
            raise ProtocolError(
                f"station {self.side.value}: expected pulse for trial {self._next_pulse}, got {msg.trial}"
            )
        if msg.pulse_axis not in (0.0, HALF_PI):
            raise ProtocolError(f"station {self.side.value}: bad pulse axis {msg.pulse_axis!r}")
        self._next_pulse += 1
        self._pulses[msg.trial] = msg
        return self._maybe_fire()

    def receive_setting(self, msg: SettingMsg) -> Optional[OutcomeMsg]:
        if msg.trial != self._next_setting:
            raise ProtocolError(
                f"station {self.side.value}: expected setting for trial {self._next_setting}, got {msg.trial}"
            )
        self._next_setting += 1
        self._settings[msg.trial] = msg
        return self._maybe_fire()

    def _maybe_fire(self) -> Optional[OutcomeMsg]:
        n = self._next_outcome
        if n not in self._pulses or n not in self._settings:
            return None
        pulse = self._pulses.pop(n)
        setting = self._settings.pop(n)
        angle = self.angles[int(setting.label) - 1]
        detected = station_step(self.strategy, angle, pulse.pulse_axis, self.stream)
        self._next_outcome += 1
        return OutcomeMsg(n, self.side, setting.label, pulse.pulse_axis, detected)

    @property
    def pending(self) -> bool:
        return bool(self._pulses or self._settings)


class Collector:
    """Assembles TrialRecords from the two stations' outcome streams."""

    def __init__(self):
        self.records: list[TrialRecord] = []
        self._x: dict[int, OutcomeMsg] = {}
        self._y: dict[int, OutcomeMsg] = {}
        self._next_x = 0
        self._next_y = 0

    def receive(self, msg: OutcomeMsg) -> Optional[TrialRecord]:
        if msg.side is Side.LEFT:
            expected, self._next_x = self._next_x, self._next_x + 1
            self._x[msg.trial] = msg
        else:
            expected, self._next_y = self._next_y, self._next_y + 1
            self._y[msg.trial] = msg
        if msg.trial != expected:
            raise ProtocolError(
                f"collector: expected trial {expected} from {msg.side.value}, got {msg.trial}"
            )
        n = len(self.records)
        if n not in self._x or n not in self._y:
            return None
        x, y = self._x.pop(n), self._y.pop(n)
        if abs(x.pulse_axis - y.pulse_axis) != HALF_PI:
            raise ProtocolError(f"collector: trial {n} pulse axes are not orthogonal")
        record = TrialRecord(
            index=n,
            mode=SourceMode.from_left_axis(x.pulse_axis),
            a_label=x.label,
            b_label=y.label,
            x_detected=x.detected,
            y_detected=y.detected,
        )
        self.records.append(record)
        return record

    @property
    def pending(self) -> bool:
        return bool(self._x or self._y)


class Verdict(enum.Enum):
    PASS = "PASS"
    FAIL = "FAIL"


@dataclass(frozen=True)
class RefereeReport:
    trials_checked: int
    mismatches: int
    verdict: Verdict
    diagnostic: str = ""


def referee_verify(
    disclosed_a: Sequence[int],
    disclosed_b: Sequence[int],
    log: Sequence[TrialRecord],
    expected_trials: Optional[int] = None,
) -> RefereeReport:
    """Compare the randomizers' disclosed labels with the logged ones.

    ``expected_trials`` defaults to the log length. Any length disagreement is
    a FAIL, with ``trials_checked`` set to the comparable prefix.
    """
    total = len(log) if expected_trials is None else expected_trials
    checked = min(len(disclosed_a), len(disclosed_b), len(log))
    mismatches = 0
    for n in range(checked):
        rec = log[n]
        if rec.index != n:
            raise ProtocolError(f"log index {rec.index} at position {n}")
        if int(disclosed_a[n]) != int(rec.a_label):
            mismatches += 1
        if int(disclosed_b[n]) != int(rec.b_label):
            mismatches += 1
    lengths = {len(disclosed_a), len(disclosed_b), len(log)}
    diagnostic = ""
    if len(lengths) > 1 or checked != total:
        diagnostic = (
            f"length mismatch: a={len(disclosed_a)} b={len(disclosed_b)} "
            f"log={len(log)} expected={total}"
        )
    elif mismatches:
        diagnostic = f"{mismatches} label mismatch(es)"
    ok = mismatches == 0 and checked == total and len(lengths) == 1
    return RefereeReport(checked, mismatches, Verdict.PASS if ok else Verdict.FAIL, diagnostic)


@dataclass
class Session:
    """Everything an in-process run leaves behind."""

    config: ExperimentConfig
    log: list[TrialRecord]
    disclosed_a: list[SettingLabel] = field(default_factory=list)
    disclosed_b: list[SettingLabel] = field(default_factory=list)

    def referee(self) -> RefereeReport:
        return referee_verify(self.disclosed_a, self.disclosed_b, self.log, self.config.trials)


def build_roles(
    config: ExperimentConfig,
    strategy_x: Optional[StationStrategy] = None,
    strategy_y: Optional[StationStrategy] = None,
) -> tuple[Source, Randomizer, Randomizer, Station, Station]:
    seed = config.master_seed
    default = MalusPoissonStrategy(config.detector_rule)
    return (
        Source(derive_stream(seed, Role.SOURCE)),
        Randomizer(derive_stream(seed, Role.RAND_A)),
        Randomizer(derive_stream(seed, Role.RAND_B)),
        Station(Side.LEFT, config.left_angles, strategy_x or default, derive_stream(seed, Role.STATION_X)),
        Station(Side.RIGHT, config.right_angles, strategy_y or default, derive_stream(seed, Role.STATION_Y)),
    )


def run_session(
    config: ExperimentConfig,
    strategy_x: Optional[StationStrategy] = None,
    strategy_y: Optional[StationStrategy] = None,
) -> Session:
    """Run all roles in-process, in the fixed order O, A, B, X, Y per trial."""
    source, rand_a, rand_b, station_x, station_y = build_roles(config, strategy_x, strategy_y)
    collector = Collector()
    for _ in range(config.trials):
        pulse_x, pulse_y, _mode = source.step()
        set_a = rand_a.step()
        set_b = rand_b.step()
        station_x.receive_pulse(pulse_x)
        out_x = station_x.receive_setting(set_a)
        station_y.receive_pulse(pulse_y)
        out_y = station_y.receive_setting(set_b)
        collector.receive(out_x)
        collector.receive(out_y)
    return Session(config, collector.records, rand_a.disclose(), rand_b.disclose())


def run_experiment(
    config: ExperimentConfig,
    strategy_x: Optional[StationStrategy] = None,
    strategy_y: Optional[StationStrategy] = None,
) -> list[TrialRecord]:
    return run_session(config, strategy_x, strategy_y).log
