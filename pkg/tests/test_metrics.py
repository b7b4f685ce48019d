"""Binning, histogram/KDE calibration errors, KS, and scalar metrics."""

import numpy as np
import pytest

from truthcal.metrics import (
    BinningScheme,
    KdeConfig,
    ScoredSamples,
    accuracy,
    brier,
    build_bins,
    ece,
    ece_kde,
    kernel_derivs,
    kernel_values,
    ks_error,
    nll,
    reliability_csv,
    reliability_diagram,
    silverman_bandwidth,
)
from truthcal.synth import oracle_ece


def calibrated_samples(rng, n):
    conf = rng.uniform(0.05, 1.0, size=n)
    return ScoredSamples(conf, rng.random(n) < conf)


# ---------------------------------------------------------------- binning


def test_equal_mass_hand_example():
    conf = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
    bins = build_bins(conf, 3)
    np.testing.assert_array_equal(bins.endpoints, [0.1, 0.3, 0.5, 1.0])
    np.testing.assert_array_equal(np.bincount(bins.assign(conf)), [2, 2, 2])


def test_equal_width_bins():
    bins = build_bins(np.array([0.2, 0.9]), 4, policy="equal_width")
    np.testing.assert_allclose(bins.endpoints, [0.2, 0.4, 0.6, 0.8, 1.0], atol=1e-15)
    assert bins.policy == "equal_width"


def test_bins_top_endpoint_pinned_to_one():
    bins = build_bins(np.array([0.3, 0.4, 0.5, 0.6]), 2)
    assert bins.endpoints[-1] == 1.0
    assert bins.endpoints[0] == 0.3


def test_tied_quantiles_collapse_with_warning():
    conf = np.array([0.5] * 50 + [0.9] * 2)
    with pytest.warns(UserWarning, match="tied quantiles"):
        bins = build_bins(conf, 10)
    assert bins.num_bins < 10
    assert bins.requested_bins == 10
    assert (np.diff(bins.endpoints) > 0).all()


def test_identical_confidences_fall_back_to_single_bin():
    with pytest.warns(UserWarning, match="identical"):
        bins = build_bins(np.full(8, 0.7), 5)
    assert bins.num_bins == 1
    assert bins.assign(np.array([0.7]))[0] == 0


def test_assign_half_open_bins_and_clamping():
    bins = BinningScheme(np.array([0.0, 0.5, 0.8, 1.0]))
    conf = np.array([0.0, 0.5, 0.79, 0.8, 1.0, 1.3, -0.2])
    np.testing.assert_array_equal(bins.assign(conf), [0, 1, 1, 2, 2, 2, 0])
    assert bins.out_of_range(conf) == 2


def test_binning_scheme_validation():
    with pytest.raises(ValueError, match="ascending"):
        BinningScheme(np.array([0.0, 0.5, 0.5, 1.0]))
    with pytest.raises(ValueError, match="two endpoints"):
        BinningScheme(np.array([0.5]))
    with pytest.raises(ValueError, match="num_bins"):
        build_bins(np.array([0.1, 0.9]), 0)


# ---------------------------------------------------------------- ece


def test_ece_hand_example():
    samples = ScoredSamples(
        np.array([0.6, 0.7, 0.9, 0.95]), np.array([True, False, True, True])
    )
    bins = BinningScheme(np.array([0.5, 0.8, 1.0]))
    val = ece(samples, bins)
    # (2/4)|0.5-0.65| + (2/4)|1-0.925|; one ulp below the decimal literal
    assert abs(val - 0.1125) < 1e-15
    #  independent naive tabulation agrees bitwise
    assert val == oracle_ece(samples.confidence, samples.correct, bins)


@pytest.mark.filterwarnings("ignore:tied quantiles")
def test_ece_matches_oracle_on_random_instances():
    rng = np.random.default_rng(13)
    for _ in range(200):
        n = int(rng.integers(1, 400))
        samples = calibrated_samples(rng, n)
        bins = build_bins(rng.uniform(0.05, 1.0, size=max(n, 4)), int(rng.integers(1, 20)))
        want = oracle_ece(samples.confidence, samples.correct, bins)
        assert abs(ece(samples, bins) - want) < 1e-12


def test_ece_permutation_invariant():
    # value-level invariance; summation order may wobble the last ulp
    rng = np.random.default_rng(14)
    samples = calibrated_samples(rng, 500)
    bins = build_bins(samples.confidence, 10)
    perm = rng.permutation(500)
    assert abs(ece(samples, bins) - ece(samples.subset(perm), bins)) < 1e-12


def test_ece_recoverable_from_diagram_rows():
    rng = np.random.default_rng(15)
    samples = calibrated_samples(rng, 300)
    bins = build_bins(samples.confidence, 7)
    rows = reliability_diagram(samples, bins)
    total = sum(r.count for r in rows)
    assert total == 300
    recovered = sum(
        (r.count / total) * abs(r.acc - r.avg_conf) for r in rows if r.count
    )
    assert abs(recovered - ece(samples, bins)) < 1e-15


def test_reliability_diagram_empty_and_single_bin():
    samples = ScoredSamples(np.array([0.9, 0.95, 0.85]), np.array([1, 0, 1]))
    rows = reliability_diagram(samples, BinningScheme(np.array([0.0, 0.5, 1.0])))
    assert rows[0].count == 0 and rows[0].acc is None and rows[0].avg_conf is None
    assert rows[1].count == 3
    whole = reliability_diagram(samples, BinningScheme(np.array([0.0, 1.0])))[0]
    assert abs(whole.acc - 2.0 / 3.0) < 1e-15
    assert abs(whole.avg_conf - 0.9) < 1e-15


def test_reliability_csv_format():
    samples = ScoredSamples(np.array([0.9]), np.array([True]))
    rows = reliability_diagram(samples, BinningScheme(np.array([0.0, 0.5, 1.0])))
    text = reliability_csv(rows)
    lines = text.strip().split("\n")
    assert lines[0] == "bin_low,bin_high,count,avg_conf,acc"
    assert lines[1] == "0.000000,0.500000,0,,"
    assert lines[2] == "0.500000,1.000000,1,0.900000,1.000000"


# ---------------------------------------------------------------- ks


def test_ks_hand_example():
    assert ks_error(ScoredSamples(np.array([0.6, 0.9]), np.array([True, True]))) == 0.25


def test_ks_bounds_and_permutation():
    rng = np.random.default_rng(16)
    for _ in range(50):
        samples = calibrated_samples(rng, int(rng.integers(1, 200)))
        v = ks_error(samples)
        assert 0.0 <= v <= 1.0
        assert v == ks_error(samples.subset(rng.permutation(len(samples))))


# ---------------------------------------------------------------- kde


def test_ece_kde_point_mass_limit():
    # all mass at 0.7 with accuracy 1/2: the error must be ~|0.7 - 0.5|.
    # bandwidth chosen well above the grid spacing so the spike is resolved;
    # |g - 0.5| is linear over the kernel support, so the smearing cancels.
    samples = ScoredSamples(np.full(200, 0.7), np.arange(200) % 2 == 0)
    val = ece_kde(samples, KdeConfig(bandwidth=0.05, integration_range=(0.0, 1.0)))
    assert abs(val - 0.2) < 1e-4


def test_ece_kde_matching_accuracy_bounded_by_bandwidth():
    # every sample at confidence c with accuracy exactly c: the smoothed
    # accuracy is flat at c, so the residual is only the kernel width
    samples = ScoredSamples(np.full(100, 0.8), np.arange(100) < 80)
    h = 0.01
    val = ece_kde(
        samples, KdeConfig(bandwidth=h, grid_points=2048, integration_range=(0.0, 1.0))
    )
    assert val < 0.5 * h


def test_ece_kde_grid_refinement_stable():
    rng = np.random.default_rng(17)
    for seed in range(3):
        samples = calibrated_samples(np.random.default_rng(seed), 1000)
        coarse = ece_kde(samples, KdeConfig(grid_points=512))
        fine = ece_kde(samples, KdeConfig(grid_points=1024))
        assert abs(coarse - fine) < 1e-4
    del rng


def test_ece_kde_permutation_invariant_and_kernel_options():
    rng = np.random.default_rng(18)
    samples = calibrated_samples(rng, 400)
    perm = rng.permutation(400)
    assert abs(ece_kde(samples) - ece_kde(samples.subset(perm))) < 1e-12
    g = ece_kde(samples, KdeConfig(kernel="gaussian"))
    assert np.isfinite(g) and g >= 0.0


def test_ece_kde_range_resolution():
    rng = np.random.default_rng(19)
    samples = calibrated_samples(rng, 300)
    # explicit range wins; num_classes implies [1/L, 1]
    a = ece_kde(samples, KdeConfig(integration_range=(0.25, 1.0)))
    b = ece_kde(samples, KdeConfig(), num_classes=4)
    assert a == b
    c = ece_kde(samples, KdeConfig())  # defaults to [0, 1]
    assert c != b


def test_kde_config_validation():
    with pytest.raises(ValueError, match="kernel"):
        KdeConfig(kernel="box")
    with pytest.raises(ValueError, match="bandwidth"):
        KdeConfig(bandwidth=0.0)
    with pytest.raises(ValueError, match="grid_points"):
        KdeConfig(grid_points=10)
    with pytest.raises(ValueError, match="integration range"):
        KdeConfig(integration_range=(0.9, 0.1))


def test_silverman_bandwidth():
    vals = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
    want = 1.06 * float(vals.std(ddof=1)) * 6 ** (-0.2)
    assert abs(silverman_bandwidth(vals) - want) < 1e-15
    # degenerate inputs hit the floor
    assert silverman_bandwidth(np.full(50, 0.5)) == 1e-3
    assert silverman_bandwidth(np.array([0.5])) == 1e-3


def test_triweight_kernel_shape():
    u = np.linspace(-2.0, 2.0, 4001)
    k = kernel_values(u, "triweight")
    assert k.max() == k[2000] == 35.0 / 32.0
    assert (k[np.abs(u) > 1.0] == 0.0).all()
    # integrates to 1 over its support
    assert abs(np.trapezoid(k, u) - 1.0) < 1e-6


def test_kernel_derivs_match_finite_differences():
    u = np.linspace(-0.95, 0.95, 39)
    step = 1e-6
    for kernel in ("triweight", "gaussian"):
        fd = (kernel_values(u + step, kernel) - kernel_values(u - step, kernel)) / (2 * step)
        np.testing.assert_allclose(kernel_derivs(u, kernel), fd, atol=1e-7)


# ---------------------------------------------------------------- scalars


def test_accuracy_trivial_cases():
    probs = np.array([[0.7, 0.3], [0.2, 0.8], [0.6, 0.4], [0.1, 0.9]])
    assert accuracy(probs, np.array([0, 1, 0, 1])) == 1.0
    assert accuracy(probs, np.array([1, 0, 1, 0])) == 0.0
    assert accuracy(probs, np.array([0, 1, 1, 0])) == 0.5


def test_nll_and_brier():
    probs = np.array([[0.5, 0.5], [0.9, 0.1]])
    labels = np.array([0, 0])
    want_nll = -(np.log(0.5) + np.log(0.9)) / 2.0
    assert abs(nll(probs, labels) - want_nll) < 1e-15
    # brier: ||p - onehot||^2 averaged
    want_brier = (((0.5 - 1) ** 2 + 0.5**2) + ((0.9 - 1) ** 2 + 0.1**2)) / 2.0
    assert abs(brier(probs, labels) - want_brier) < 1e-15
    # zero probability on the label stays finite through the floor
    assert np.isfinite(nll(np.array([[1.0, 0.0]]), np.array([1])))


def test_scored_samples_validation():
    with pytest.raises(ValueError, match="equal-length"):
        ScoredSamples(np.array([[0.5]]), np.array([True]))
    with pytest.raises(ValueError, match="at least one"):
        ScoredSamples(np.array([]), np.array([]))
    with pytest.raises(ValueError, match="non-finite"):
        ScoredSamples(np.array([np.nan]), np.array([True]))
