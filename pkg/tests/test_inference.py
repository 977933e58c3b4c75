import warnings

import numpy as np
import pytest
from scipy import special

from topohazard.inference import (
    DegenerateBandWarning,
    bootstrap_band,
    bootstrap_threshold,
    coverage_experiment,
    naive_band,
    psd_sqrt,
    replicate_band,
    replicate_pointwise,
)
from topohazard.nelson_aalen import StepCurve
from topohazard.randfield import FieldModel, MaternParams, simulate_grf

Z975 = special.ndtri(0.975)


def curves_from(rows, levels=None):
    levels = np.arange(np.shape(rows)[1], dtype=float) if levels is None else levels
    return [StepCurve(levels, r, kind="grid") for r in rows]


def test_pointwise_identical_curves_zero_width():
    b = replicate_pointwise(curves_from(np.ones((5, 4))))
    assert np.all(b.half_width == 0)
    assert b.method == "replicate"


def test_pointwise_two_replicates_formula():
    b = replicate_pointwise(np.array([[0.0, 1.0], [2.0, 5.0]]))
    sd = np.array([np.sqrt(2.0), np.sqrt(8.0)])
    assert np.allclose(b.half_width, Z975 * sd / np.sqrt(2))
    assert np.allclose(b.center, [1.0, 3.0])


def test_mismatched_grids_rejected():
    a = StepCurve([0.0, 1.0], [0.0, 1.0], kind="grid")
    b = StepCurve([0.0, 2.0], [0.0, 1.0], kind="grid")
    with pytest.raises(ValueError):
        replicate_pointwise([a, b])


def test_pointwise_coverage_monte_carlo():
    rng = np.random.default_rng(0)
    sd = np.array([0.5, 1.0, 2.0])
    hits = np.zeros(3)
    for _ in range(1000):
        b = replicate_pointwise(rng.standard_normal((30, 3)) * sd)
        hits += np.abs(b.center) <= b.half_width
    # t-vs-normal critical value costs ~0.6 points at N=30
    assert np.all(np.abs(hits / 1000 - 0.95) < 0.02)


def test_band_single_point_is_normal_quantile():
    rng = np.random.default_rng(1)
    b = replicate_band(rng.standard_normal((20, 1)), mc_draws=200_000, seed=2)
    assert b.threshold == pytest.approx(Z975, abs=0.02)


def test_band_independent_matches_sidak():
    rng = np.random.default_rng(3)
    b = replicate_band(rng.standard_normal((5000, 10)), mc_draws=200_000, seed=4)
    assert b.threshold == pytest.approx(special.ndtri((1 + 0.95 ** 0.1) / 2), abs=0.03)


def test_simultaneous_wider_than_pointwise():
    rng = np.random.default_rng(5)
    A = np.cumsum(rng.standard_normal((40, 25)), axis=1)
    band = replicate_band(A, seed=1)
    pw = replicate_pointwise(A)
    assert np.all(band.half_width >= pw.half_width)
    assert band.threshold > 0


def test_band_invariant_to_level_shift():
    rng = np.random.default_rng(6)
    A = rng.standard_normal((10, 8))
    lv = np.linspace(-1, 1, 8)
    b1 = replicate_band(curves_from(A, lv), seed=3)
    b2 = replicate_band(curves_from(A, lv + 7.5), seed=3)
    assert np.array_equal(b1.half_width, b2.half_width)
    assert np.array_equal(b1.levels + 7.5, b2.levels)


def test_psd_repair_warns():
    bad = np.array([[1.0, 0.9, -0.9], [0.9, 1.0, 0.9], [-0.9, 0.9, 1.0]])
    with pytest.warns(DegenerateBandWarning):
        root = psd_sqrt(bad)
    assert np.all(np.linalg.eigvalsh(root @ root.T) > -1e-12)


def test_naive_band_threshold_at_least_pointwise():
    v = np.linspace(0.01, 0.2, 30)
    b = naive_band(np.zeros(30), v, np.arange(30.0), seed=1)
    assert b.threshold > Z975
    assert np.allclose(b.extra["pointwise_half_width"], Z975 * np.sqrt(v))


def test_bootstrap_threshold_monotone_in_alpha():
    rng = np.random.default_rng(8)
    boot = np.cumsum(rng.standard_normal((300, 20)), axis=1)
    d05 = bootstrap_threshold(boot, 0.05)[0]
    d20 = bootstrap_threshold(boot, 0.20)[0]
    assert d05 > d20 > 0


def test_bootstrap_zero_spread_point_dropped_with_warning():
    rng = np.random.default_rng(9)
    boot = rng.standard_normal((200, 5))
    boot[:, 0] = 0.0
    with pytest.warns(DegenerateBandWarning):
        d, _, sd, _ = bootstrap_threshold(boot, 0.05)
    assert sd[0] == 0 and np.isfinite(d)


def test_bootstrap_degenerate_stub_errors():
    field = simulate_grf(8, 8, MaternParams(2.0, 1.0), seed=0)

    def stub(params, B, seed):
        return np.tile(field.values.ravel(), (B, 1))

    with pytest.raises(ValueError, match="zero spread"):
        bootstrap_band(field, B=100, grid=np.linspace(-2, 2, 10), seed=0, simulator=stub,
                       params=MaternParams(2.0, 1.0))


def test_bootstrap_band_centred_on_original():
    field = simulate_grf(20, 20, MaternParams(3.0, 1.0), seed=1)
    grid = np.linspace(-1.5, 0.5, 15)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateBandWarning)
        b = bootstrap_band(field, B=100, grid=grid, seed=2, params=MaternParams(3.0, 1.0))
    from topohazard.nelson_aalen import field_na_curves

    assert np.array_equal(b.center, np.atleast_1d(field_na_curves(field)[0](grid)))
    assert np.all(b.half_width >= 0)
    assert np.all(b.half_width >= b.extra["pointwise_half_width"] - 1e-12) or b.threshold < Z975


def test_coverage_zero_trials():
    t = coverage_experiment(FieldModel("M1", MaternParams(5, 1)), 10, 10, "replicate", 0)
    assert t.trials == 0 and t.simultaneous is None


def test_coverage_deterministic_across_workers():
    model = FieldModel("M1", MaternParams(3.0, 1.0))
    a = coverage_experiment(model, 12, 12, "naive", 6, seed=3, workers=1)
    b = coverage_experiment(model, 12, 12, "naive", 6, seed=3, workers=3)
    assert a.row() == b.row()


def test_coverage_rejects_non_gaussian():
    with pytest.raises(ValueError):
        coverage_experiment(FieldModel("M2", MaternParams(5, 1)), 10, 10, "replicate", 1)
