"""Domain types, angle arithmetic and role-keyed random streams."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi
HALF_PI = 0.5 * math.pi

#: Polarizer settings that reproduce the textbook CHSH optimum.
DEFAULT_LEFT_ANGLES = (0.0, math.pi / 4)
DEFAULT_RIGHT_ANGLES = (math.pi / 8, -math.pi / 8)


class EprSimError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(EprSimError, ValueError):
    """An experiment configuration is invalid."""


def canonicalize(radians: float) -> float:
    """Return the representative of ``radians`` in ``[0, 2*pi)``."""
    if not math.isfinite(radians):
        raise ConfigError(f"angle must be finite, got {radians!r}")
    r = math.fmod(radians, TWO_PI)
    if r < 0.0:
        r += TWO_PI
    # fmod of a tiny negative number can round up to exactly 2*pi
    if r >= TWO_PI:
        r = 0.0
    return r


def malus_intensity(setting: float, pulse_axis: float) -> float:
    """Fraction of a polarized pulse passed by a polarizer at ``setting``."""
    return math.cos(setting - pulse_axis) ** 2


class SourceMode(enum.Enum):
    """Which of the two orthogonal pulse pairs the source emitted.

    ``VH`` sends the vertical pulse (axis 0) left and the horizontal pulse
    (axis pi/2) right; ``HV`` swaps them.
    """

    VH = "VH"
    HV = "HV"

    @property
    def left_axis(self) -> float:
        return 0.0 if self is SourceMode.VH else HALF_PI

    @property
    def right_axis(self) -> float:
        return HALF_PI if self is SourceMode.VH else 0.0

    @classmethod
    def from_left_axis(cls, axis: float) -> SourceMode:
        if axis == 0.0:
            return cls.VH
        if axis == HALF_PI:
            return cls.HV
        raise ValueError(f"not a source pulse axis: {axis!r}")


class SettingLabel(enum.IntEnum):
    ONE = 1
    TWO = 2


class DetectorRule(enum.Enum):
    """How a uniform draw is compared against the Malus intensity."""

    STRICT_LESS = "strict_less"
    LESS_OR_EQUAL = "less_or_equal"

    def fires(self, u: float, intensity: float) -> bool:
        if self is DetectorRule.STRICT_LESS:
            return u < intensity
        return u <= intensity


class Role(enum.Enum):
    """Stream owners. Values are the fixed per-role split constants."""

    SOURCE = 1
    RAND_A = 2
    RAND_B = 3
    STATION_X = 4
    STATION_Y = 5
    TAUTOLOGY = 6


@dataclass(frozen=True)
class ExperimentConfig:
    left_angles: tuple[float, float] = DEFAULT_LEFT_ANGLES
    right_angles: tuple[float, float] = DEFAULT_RIGHT_ANGLES
    trials: int = 100_000
    master_seed: int = 0
    detector_rule: DetectorRule = DetectorRule.STRICT_LESS

    def __post_init__(self) -> None:
        if isinstance(self.trials, bool) or not isinstance(self.trials, int):
            raise ConfigError(f"trials must be an integer, got {self.trials!r}")
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}")
        if isinstance(self.master_seed, bool) or not isinstance(self.master_seed, int):
            raise ConfigError(f"master_seed must be an integer, got {self.master_seed!r}")
        if not 0 <= self.master_seed < 2**64:
            raise ConfigError(f"master_seed must fit in 64 unsigned bits, got {self.master_seed}")
        if not isinstance(self.detector_rule, DetectorRule):
            raise ConfigError(f"unknown detector rule {self.detector_rule!r}")
        for side, angles in (("left", self.left_angles), ("right", self.right_angles)):
            if len(angles) != 2:
                raise ConfigError(f"{side}_angles needs exactly two angles, got {len(angles)}")
            first, second = (canonicalize(float(t)) for t in angles)
            if first == second:
                raise ConfigError(f"{side}_angles must be distinct modulo 2*pi")
        object.__setattr__(self, "left_angles", tuple(float(t) for t in self.left_angles))
        object.__setattr__(self, "right_angles", tuple(float(t) for t in self.right_angles))

    def left_angle(self, label: SettingLabel | int) -> float:
        return self.left_angles[int(label) - 1]

    def right_angle(self, label: SettingLabel | int) -> float:
        return self.right_angles[int(label) - 1]

    def to_dict(self) -> dict:
        return {
            "left_angles": list(self.left_angles),
            "right_angles": list(self.right_angles),
            "trials": self.trials,
            "master_seed": self.master_seed,
            "detector_rule": self.detector_rule.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        try:
            return cls(
                left_angles=tuple(data["left_angles"]),
                right_angles=tuple(data["right_angles"]),
                trials=data["trials"],
                master_seed=data["master_seed"],
                detector_rule=DetectorRule(data["detector_rule"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad configuration: {exc}") from exc


@dataclass(frozen=True, slots=True)
class TrialRecord:
    index: int
    mode: SourceMode
    a_label: SettingLabel
    b_label: SettingLabel
    x_detected: bool
    y_detected: bool

    @property
    def x_outcome(self) -> int:
        """Gill-style +/-1 outcome: detection maps to +1."""
        return 1 if self.x_detected else -1

    @property
    def y_outcome(self) -> int:
        return 1 if self.y_detected else -1


def role_generator(master_seed: int, role: Role) -> np.random.Generator:
    """PCG64 generator split off ``master_seed`` by the role constant."""
    seq = np.random.SeedSequence(entropy=master_seed, spawn_key=(role.value,))
    return np.random.Generator(np.random.PCG64(seq))


class RandomStream:
    """Deterministic uniform stream owned by a single role.

    The stream for ``(master_seed, role)`` is a PCG64 generator seeded from a
    ``SeedSequence`` whose spawn key is the role constant, so streams of
    different roles are independent and each is exactly reproducible.
    """

    _BLOCK = 4096

    def __init__(self, master_seed: int, role: Role):
        if not 0 <= master_seed < 2**64:
            raise ConfigError(f"master_seed must fit in 64 unsigned bits, got {master_seed}")
        self.master_seed = master_seed
        self.role = role
        self._gen = role_generator(master_seed, role)
        self._buf = np.empty(0)
        self._pos = 0

    def uniform(self) -> float:
        if self._pos >= len(self._buf):
            # drawing in blocks yields the same values as one-at-a-time draws
            self._buf = self._gen.random(self._BLOCK)
            self._pos = 0
        u = float(self._buf[self._pos])
        self._pos += 1
        return u

    def uniforms(self, n: int) -> np.ndarray:
        return np.fromiter((self.uniform() for _ in range(n)), dtype=float, count=n)

    def __repr__(self) -> str:
        return f"RandomStream(master_seed={self.master_seed}, role={self.role.name})"


def derive_stream(master_seed: int, role: Role) -> RandomStream:
    return RandomStream(master_seed, role)


def next_uniform(stream: RandomStream) -> float:
    """Draw one value in ``[0, 1)`` and advance the stream."""
    return stream.uniform()
