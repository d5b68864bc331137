import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eprsim.analysis import (
    PAIRS,
    Cell,
    FactorEstimate,
    InsufficientDataError,
    Mode,
    SideCounts,
    SideName,
    UndefinedCorrelationError,
    AnalysisError,
    analyze,
    chsh,
    estimate_factors,
    factors_from_ratios,
    kappa_gill,
    kappa_malus,
    no_signaling_gap,
    running_report,
    tally_pairs,
    tally_sides,
    PairCounts,
    PairTally,
)
from eprsim.core import HALF_PI, ExperimentConfig, SettingLabel, SourceMode, TrialRecord, malus_intensity
from eprsim.protocol import run_experiment

DEFAULT_CFG = ExperimentConfig(trials=1)
R2 = math.sqrt(0.5)


def rec(i, mode, a, b, x, y):
    return TrialRecord(i, SourceMode(mode), SettingLabel(a), SettingLabel(b), bool(x), bool(y))


HAND_LOG = [
    rec(0, "VH", 1, 1, 1, 1),
    rec(1, "HV", 1, 1, 0, 1),
    rec(2, "VH", 1, 2, 1, 0),
    rec(3, "VH", 1, 2, 0, 0),
    rec(4, "HV", 2, 1, 1, 1),
    rec(5, "HV", 2, 1, 1, 0),
    rec(6, "VH", 2, 2, 0, 1),
    rec(7, "HV", 2, 2, 0, 1),
]


def test_tally_empty():
    counts = tally_pairs([])
    assert all(counts[p].n_total == 0 for p in PAIRS)


def test_tally_single():
    counts = tally_pairs([rec(0, "VH", 1, 1, 1, 1)])
    assert (counts[(1, 1)].n_equal, counts[(1, 1)].n_unequal) == (1, 0)
    assert counts.total == 1


def test_tally_hand_log():
    counts = tally_pairs(HAND_LOG)
    # hand tally: equal when x == y
    expected = {(1, 1): (1, 1), (1, 2): (1, 1), (2, 1): (1, 1), (2, 2): (0, 2)}
    for pair, (eq, ne) in expected.items():
        assert (counts[pair].n_equal, counts[pair].n_unequal) == (eq, ne)
    assert counts.total == 8


def test_kappa_gill_arithmetic():
    counts = PairCounts()
    counts.tallies[(1, 1)] = PairTally(40, 60)
    counts.tallies[(1, 2)] = PairTally(7, 0)
    assert kappa_gill(counts, (1, 1)) == pytest.approx(-0.2)
    assert kappa_gill(counts, (1, 2)) == 1.0
    with pytest.raises(UndefinedCorrelationError):
        kappa_gill(counts, (2, 2))


def test_chsh_examples():
    assert chsh({(1, 2): R2, (1, 1): R2, (2, 1): R2, (2, 2): -R2}) == pytest.approx(2 * math.sqrt(2))
    assert chsh(dict.fromkeys(PAIRS, 0.0)) == 0.0
    assert chsh({(1, 1): -R2, (1, 2): -R2, (2, 1): 0.0, (2, 2): 0.0}) == pytest.approx(-math.sqrt(2))
    with pytest.raises(AnalysisError):
        chsh({(1, 1): 1.0})


def test_tally_sides_empty():
    left, right = tally_sides([], DEFAULT_CFG)
    assert left.total_exposures == right.total_exposures == 0


def test_tally_sides_hand_log():
    left, right = tally_sides(HAND_LOG, DEFAULT_CFG)
    assert left.cell(1, 0.0) == Cell(detections=2, exposures=3)
    assert left.cell(1, HALF_PI) == Cell(detections=0, exposures=1)
    assert right.cell(2, 0.0) == Cell(detections=1, exposures=1)
    assert right.cell(2, HALF_PI) == Cell(detections=1, exposures=3)
    assert left.total_exposures == right.total_exposures == 8


def test_tally_sides_regime_sizes(default_session):
    T = len(default_session.log)
    left, right = tally_sides(default_session.log, default_session.config)
    # each trial lands in one cell per side: 2 labels x 2 axes -> T/4 per cell
    bound = 3 * math.sqrt(T * (1 / 4) * (3 / 4))
    for side in (left, right):
        for cell in side.cells.values():
            assert abs(cell.exposures - T / 4) < bound
    # over both sides the 8 regimes share 2T exposures
    assert left.total_exposures + right.total_exposures == 2 * T
    # parallel regime: label 1 at X is angle 0, axis 0
    c = left.cell(1, 0.0)
    assert c.detections == c.exposures



def test_exact_factor_at_pi_over_8():
    cos_est, sin_est = factors_from_ratios(math.cos(math.pi / 8) ** 2, math.sin(math.pi / 8) ** 2, math.pi / 8)
    assert cos_est == pytest.approx(0.9238795325, abs=1e-10)
    assert sin_est == pytest.approx(math.sin(math.pi / 8), abs=1e-12)


def test_exact_factor_at_zero():
    cos_est, sin_est = factors_from_ratios(1.0, 0.0, 0.0)
    assert (cos_est, sin_est) == (1.0, 0.0)


def test_negative_angle_sign_resolution():
    cos_est, sin_est = factors_from_ratios(math.cos(math.pi / 8) ** 2, math.sin(math.pi / 8) ** 2, -math.pi / 8)
    assert cos_est > 0 and sin_est < 0


def test_estimate_factors_from_counts():
    sc = SideCounts(SideName.RIGHT)
    sc.cells[(2, 0.0)] = Cell(detections=81, exposures=100)
    sc.cells[(2, HALF_PI)] = Cell(detections=16, exposures=100)
    est = estimate_factors(sc, 2, -0.4)
    assert est == FactorEstimate(0.9, -0.4, 200)
    with pytest.raises(InsufficientDataError):
        estimate_factors(sc, 1, 0.3)


def _exact_estimate(theta):
    return FactorEstimate(*factors_from_ratios(math.cos(theta) ** 2, math.sin(theta) ** 2, theta))


def test_kappa_malus_examples():
    k = kappa_malus(_exact_estimate(0.0), _exact_estimate(math.pi / 8))
    assert k == pytest.approx(R2, abs=1e-12)
    k = kappa_malus(_exact_estimate(math.pi / 4), _exact_estimate(-math.pi / 8))
    assert k == pytest.approx(math.cos(2 * (-3 * math.pi / 8)), abs=1e-12)
    assert k == pytest.approx(-0.70711, abs=1e-5)
    assert kappa_malus(_exact_estimate(0.3), _exact_estimate(0.3)) == pytest.approx(1.0, abs=1e-12)


def test_kappa_malus_exact_on_grid():
    grid = [k * math.pi / 8 for k in range(16)]
    for tl, tr in itertools.product(grid, grid):
        k = kappa_malus(_exact_estimate(tl), _exact_estimate(tr))
        assert k == pytest.approx(math.cos(2 * (tr - tl)), abs=1e-12)


@given(
    st.floats(min_value=-10, max_value=10, allow_nan=False),
    st.floats(min_value=-10, max_value=10, allow_nan=False),
)
def test_kappa_malus_exact_anywhere(tl, tr):
    k = kappa_malus(_exact_estimate(tl), _exact_estimate(tr))
    assert k == pytest.approx(math.cos(2 * (tr - tl)), abs=1e-9)


def gill_expectation_by_enumeration(theta_a, theta_b):
    """E[xy] summed over the two equiprobable source modes with independent Bernoulli stations."""
    total = 0.0
    for mode in SourceMode:
        px = malus_intensity(theta_a, mode.left_axis)
        py = malus_intensity(theta_b, mode.right_axis)
        for x, pxv in ((1, px), (-1, 1 - px)):
            for y, pyv in ((1, py), (-1, 1 - py)):
                total += 0.5 * pxv * pyv * x * y
    return total


def test_gill_oracle_closed_form():
    grid = [k * math.pi / 12 for k in range(-6, 7)]
    for ta, tb in itertools.product(grid, grid):
        assert gill_expectation_by_enumeration(ta, tb) == pytest.approx(
            -math.cos(2 * ta) * math.cos(2 * tb), abs=1e-12
        )


def test_gill_monte_carlo_matches_oracle(default_session):
    cfg = default_session.config
    counts = tally_pairs(default_session.log)
    for a, b in PAIRS:
        expected = gill_expectation_by_enumeration(cfg.left_angle(a), cfg.right_angle(b))
        n = counts[(a, b)].n_total
        se = math.sqrt((1 - expected**2) / n)
        assert abs(kappa_gill(counts, (a, b)) - expected) < 4 * se
    assert kappa_gill(counts, (1, 1)) == pytest.approx(-0.707, abs=0.02)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["VH", "HV"]), st.integers(1, 2), st.integers(1, 2), st.booleans(), st.booleans()), max_size=60))
def test_gill_kappa_in_range(rows):
    log = [rec(i, *row) for i, row in enumerate(rows)]
    counts = tally_pairs(log)
    for pair in PAIRS:
        if counts[pair].n_total:
            assert -1.0 <= kappa_gill(counts, pair) <= 1.0


def test_running_single_point_equals_full(default_session):
    log, cfg = default_session.log[:5000], default_session.config
    for mode in Mode:
        rep = running_report(log, cfg, mode, stride=len(log))
        assert len(rep.running_curve) == 1
        pt = rep.running_curve[0]
        assert pt.trial_index == len(log)
        assert pt.kappa == rep.kappa
        assert pt.S == rep.contrast_S == chsh(rep.kappa)


def test_running_points_match_prefix_analysis(default_session):
    log, cfg = default_session.log[:1000], default_session.config
    for mode in Mode:
        rep = running_report(log, cfg, mode, stride=250)
        for pt in rep.running_curve:
            direct = analyze(log[: pt.trial_index], cfg, mode)
            assert pt.kappa == pytest.approx(direct.kappa, abs=1e-14)


def test_running_skips_undefined_prefixes():
    rep = running_report(HAND_LOG, DEFAULT_CFG, Mode.GILL, stride=1)
    # all four pairs are first present after trial 7
    assert [p.trial_index for p in rep.running_curve] == [7, 8]
    rep = running_report(HAND_LOG[:3], DEFAULT_CFG, Mode.GILL, stride=1)
    assert rep.running_curve == [] and rep.contrast_S is None
    assert set(rep.undefined) == {(2, 1), (2, 2)}


def test_running_stride_validation():
    with pytest.raises(ValueError):
        running_report(HAND_LOG, DEFAULT_CFG, Mode.GILL, stride=0)


def test_running_stride_count():
    log = run_experiment(ExperimentConfig(trials=700, master_seed=3))
    rep = running_report(log, DEFAULT_CFG, Mode.MALUS, stride=100)
    assert [p.trial_index for p in rep.running_curve] == list(range(100, 701, 100))


def test_gill_mode_final_within_local_bound(default_session):
    rep = running_report(default_session.log, default_session.config, Mode.GILL, stride=10_000)
    assert abs(rep.running_curve[-1].S) <= 2.05


def test_malus_curve_after_700(default_session):
    rep = running_report(default_session.log[:20_000], default_session.config, Mode.MALUS, stride=1)
    tail = [p.S for p in rep.running_curve if p.trial_index > 700]
    assert max(abs(s - 2 * math.sqrt(2)) for s in tail) < 0.35


def _max_kappa_error(log, cfg):
    rep = analyze(log, cfg, Mode.MALUS)
    return max(
        abs(rep.kappa[(a, b)] - math.cos(2 * (cfg.right_angle(b) - cfg.left_angle(a)))) for a, b in PAIRS
    )


def test_malus_convergence_median():
    T = 1000
    small, large = [], []
    for seed in range(20):
        cfg = ExperimentConfig(trials=4 * T, master_seed=seed)
        log = run_experiment(cfg)
        small.append(_max_kappa_error(log[:T], cfg))
        large.append(_max_kappa_error(log, cfg))
    assert np.median(large) <= np.median(small)


def test_no_signaling(default_session):
    gap, se = no_signaling_gap(default_session.log)
    assert abs(gap) < 4 * se
