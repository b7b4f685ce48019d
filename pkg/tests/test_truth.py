"""Truth discovery: objective, closed-form updates, projection, HV.

Endpoint values are cross-checked against independent re-implementations:
a plain-python alternating-minimization loop here, and the numeric
projection oracle in truthcal.synth (itself validated against SLSQP in
test_synth.py). Frozen constants were produced by scipy SLSQP runs.
"""

import math

import numpy as np
import pytest

from truthcal.synth import oracle_projection
from truthcal.truth import (
    DegenerateReliabilityError,
    TruthConfig,
    discover_all,
    discover_truth,
    entropy_geometric_variance,
    hv_values,
    project_accuracy_preserving,
    td_objective,
    truth_matrix,
    update_reliabilities,
    update_truth,
)
from truthcal.datamodel import argmax_tiebreak

LN2 = math.log(2.0)


def random_sources(rng, s, l):
    return rng.dirichlet(np.ones(l), size=s)


# ---------------------------------------------------------------- objective


def test_objective_zero_when_sources_on_truth():
    z = np.array([0.2, 0.3, 0.5])
    sources = np.tile(z, (4, 1))
    assert td_objective(z, sources, np.array([1.0, 2.0, 3.0, 4.0])) == 0.0


def test_objective_hand_value():
    # two unit-corner sources around (0.5, 0.5), both omega = ln 2:
    # each squared distance is 0.5, objective = 2 * ln2 * 0.5 = ln 2
    obj = td_objective(np.array([0.5, 0.5]), np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([LN2, LN2]))
    assert abs(obj - LN2) < 1e-15


def test_objective_linear_in_omega():
    rng = np.random.default_rng(0)
    sources = random_sources(rng, 5, 4)
    z = sources.mean(axis=0)
    omega = rng.uniform(0.1, 2.0, size=5)
    base = td_objective(z, sources, omega)
    assert abs(td_objective(z, sources, 3.0 * omega) - 3.0 * base) < 1e-12


# ---------------------------------------------------------------- reliability


def test_reliability_equidistant_pair():
    omega = update_reliabilities(np.array([0.5, 0.5]), np.array([[1.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_allclose(omega, [LN2, LN2], atol=1e-15)


def test_reliability_constraint_sums_to_one():
    # with the squared-distance denominator, exp(-omega) = d_s^2 / sum d_t^2
    rng = np.random.default_rng(1)
    for _ in range(300):
        sources = random_sources(rng, int(rng.integers(2, 9)), int(rng.integers(2, 7)))
        z = sources.mean(axis=0)
        sq = np.square(sources - z).sum(axis=1)
        if sq.min() < 1e-11:  # keep clear of the clamp
            continue
        omega = update_reliabilities(z, sources)
        assert abs(np.exp(-omega).sum() - 1.0) < 1e-9
        assert (omega > 0.0).all()


def test_reliability_coincident_source_clamps_finite():
    truth = np.array([0.5, 0.5])
    sources = np.array([[0.5, 0.5], [0.7, 0.3]])
    omega = update_reliabilities(truth, sources)
    assert np.isfinite(omega).all()
    # clamped source is vastly more reliable than the distant one
    assert omega[0] > 20.0
    assert abs(omega[1]) < 1e-9


def test_reliability_power_one_formula():
    rng = np.random.default_rng(2)
    cfg = TruthConfig(distance_power=1)
    for _ in range(50):
        sources = random_sources(rng, 4, 3)
        z = rng.dirichlet(np.ones(3))
        sq = np.square(sources - z).sum(axis=1)
        want = np.log(sq.sum() / np.sqrt(sq))
        got = update_reliabilities(z, sources, cfg)
        np.testing.assert_allclose(got, want, atol=1e-12)


def test_update_truth_hand_values():
    sources = np.array([[0.9, 0.1], [0.3, 0.7]])
    np.testing.assert_allclose(update_truth(sources, np.array([2.0, 1.0])), [0.7, 0.3], atol=1e-15)
    np.testing.assert_allclose(update_truth(sources, np.array([1.0, 1.0])), sources.mean(axis=0), atol=1e-15)
    np.testing.assert_allclose(
        update_truth(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([1.0, 0.0])), [1.0, 0.0], atol=1e-15
    )


def test_update_truth_degenerate_masses():
    sources = np.array([[0.9, 0.1], [0.3, 0.7]])
    with pytest.raises(DegenerateReliabilityError):
        update_truth(sources, np.zeros(2))
    with pytest.raises(DegenerateReliabilityError):
        update_truth(sources, np.array([1.0, -2.0]))


# ---------------------------------------------------------------- projection


def test_projection_hand_examples():
    # c already wins -> unchanged (bitwise)
    z = np.array([0.6, 0.3, 0.1])
    np.testing.assert_array_equal(project_accuracy_preserving(z, 0), z)

    # pool c=1 with the single larger component
    got = project_accuracy_preserving(np.array([0.5, 0.3, 0.2]), 1)
    np.testing.assert_allclose(got, [0.4, 0.4, 0.2], atol=1e-15)

    # pool c=2 with the top component only: mean(0.2, 0.5) = 0.35 already
    # strictly exceeds the remaining 0.3, so 0.3 stays out of the pool
    got = project_accuracy_preserving(np.array([0.5, 0.3, 0.2]), 2)
    np.testing.assert_allclose(got, [0.35, 0.3, 0.35], atol=1e-15)

    # pool exhausts all competitors -> uniform
    got = project_accuracy_preserving(np.array([0.1, 0.45, 0.45]), 0)
    np.testing.assert_allclose(got, [1.0 / 3.0] * 3, atol=1e-15)


def test_projection_frozen_slsqp_case():
    # frozen: scipy SLSQP projection (ftol 1e-14) of a fixed L=5 draw
    z = np.array([
        0.3110959695409141,
        0.12587260635153036,
        0.17193955782596368,
        0.01822876985579844,
        0.37286309642579346,
    ])
    slsqp = np.array([
        0.2852995406960292,
        0.12587260710558537,
        0.28529954069602914,
        0.018228770806327097,
        0.28529954069602925,
    ])
    got = project_accuracy_preserving(z, 2)
    assert float(np.abs(got - slsqp).max()) < 1e-7
    # the pooled level is the mean of z_c with the two larger components
    level = (z[2] + z[4] + z[0]) / 3.0
    np.testing.assert_allclose(got[[0, 2, 4]], level, atol=1e-15)
    np.testing.assert_array_equal(got[[1, 3]], z[[1, 3]])


def test_projection_feasible_idempotent_and_matches_oracle():
    rng = np.random.default_rng(3)
    for _ in range(200):
        l = int(rng.choice([3, 4, 6]))
        z = rng.dirichlet(np.full(l, 0.7))
        c = int(rng.integers(0, l))
        proj = project_accuracy_preserving(z, c)
        assert abs(proj.sum() - 1.0) < 1e-12
        assert proj.min() >= -1e-15
        assert argmax_tiebreak(proj, prefer=c) == c
        # idempotent
        np.testing.assert_allclose(project_accuracy_preserving(proj, c), proj, atol=1e-12)
        # agrees with the independent numeric oracle
        assert float(np.abs(proj - oracle_projection(z, c)).max()) < 1e-8


def test_projection_is_closest_feasible_point():
    rng = np.random.default_rng(4)
    for _ in range(100):
        l = int(rng.integers(3, 7))
        z = rng.dirichlet(np.ones(l))
        c = int(rng.integers(0, l))
        proj = project_accuracy_preserving(z, c)
        best = float(np.square(proj - z).sum())
        for _ in range(20):
            x = rng.dirichlet(np.ones(l))
            m = int(x.argmax())
            x[c], x[m] = x[m], x[c]  # force feasibility: max lands on c
            assert best <= float(np.square(x - z).sum()) + 1e-12


# ---------------------------------------------------------------- discovery


def test_discover_identical_sources_is_fixed_point():
    z = np.array([0.2, 0.3, 0.5])
    res = discover_truth(np.tile(z, (4, 1)))
    np.testing.assert_allclose(res.truth_vector, z, atol=1e-15)
    assert res.hv == 0.0
    assert res.iterations_used == 1
    assert res.converged
    # every distance clamps, in the loop pass and in the final recompute
    assert res.clamped_distances == 8
    np.testing.assert_allclose(res.objective_trace, [0.0], atol=1e-15)
    assert abs(res.uncertainties.sum() - 1.0) < 1e-9


def test_discover_symmetric_pair():
    res = discover_truth(np.array([[1.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_allclose(res.truth_vector, [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(res.reliabilities, [LN2, LN2], atol=1e-12)
    np.testing.assert_allclose(res.uncertainties, [0.5, 0.5], atol=1e-12)
    assert abs(res.hv - LN2) < 1e-12  # V=1, H=ln2
    assert res.iterations_used == 1
    assert res.converged


def test_discover_single_source_short_circuit():
    src = np.array([[0.1, 0.2, 0.7]])
    res = discover_truth(src)
    np.testing.assert_array_equal(res.truth_vector, src[0])
    np.testing.assert_array_equal(res.reliabilities, [0.0])
    np.testing.assert_array_equal(res.uncertainties, [1.0])
    assert res.hv == 0.0
    assert res.iterations_used == 0
    assert res.objective_trace.size == 0
    assert res.converged


def test_discover_matches_plain_python_reimplementation():
    # independent route: the alternating updates written out longhand
    def longhand(sources, eps, max_iters):
        z = sources.mean(axis=0)
        for _ in range(max_iters):
            d2 = np.square(sources - z).sum(axis=1)
            w = np.log(d2.sum() / d2)
            new_z = (w[:, None] * sources).sum(axis=0) / w.sum()
            moved = float(np.square(new_z - z).sum())
            z = new_z
            if moved < eps:
                break
        return z

    rng = np.random.default_rng(5)
    cfg = TruthConfig()
    for _ in range(100):
        sources = random_sources(rng, int(rng.integers(2, 12)), int(rng.integers(2, 8)))
        res = discover_truth(sources, cfg)
        want = longhand(sources, cfg.epsilon, cfg.max_iters)
        assert float(np.abs(res.truth_vector - want).max()) < 1e-12
        # final reliabilities are recomputed at the returned truth vector
        np.testing.assert_allclose(
            res.reliabilities, update_reliabilities(res.truth_vector, sources), atol=1e-12
        )


def test_discover_objective_trace_non_increasing():
    rng = np.random.default_rng(6)
    for _ in range(300):
        sources = random_sources(rng, int(rng.integers(2, 10)), int(rng.integers(2, 6)))
        res = discover_truth(sources)
        diffs = np.diff(res.objective_trace)
        assert (diffs <= 1e-12).all()
        assert res.converged


def test_discover_source_permutation_invariance():
    rng = np.random.default_rng(7)
    sources = random_sources(rng, 6, 4)
    perm = rng.permutation(6)
    a = discover_truth(sources)
    b = discover_truth(sources[perm])
    np.testing.assert_allclose(a.truth_vector, b.truth_vector, atol=1e-12)
    np.testing.assert_allclose(a.reliabilities[perm], b.reliabilities, atol=1e-12)
    assert abs(a.hv - b.hv) < 1e-12


def test_discover_accuracy_preserving_anchors_argmax():
    rng = np.random.default_rng(8)
    cfg = TruthConfig(variant="accuracy_preserving")
    for _ in range(200):
        sources = random_sources(rng, int(rng.integers(2, 8)), int(rng.integers(3, 7)))
        anchor = argmax_tiebreak(sources.mean(axis=0))
        res = discover_truth(sources, cfg)
        assert res.anchor_class == anchor
        assert argmax_tiebreak(res.truth_vector, prefer=anchor) == anchor


def test_discover_input_validation():
    with pytest.raises(ValueError, match=r"\(S, L\) matrix"):
        discover_truth(np.array([0.5, 0.5]))
    with pytest.raises(ValueError, match="epsilon"):
        TruthConfig(epsilon=0.0)
    with pytest.raises(ValueError, match="max_iters"):
        TruthConfig(max_iters=0)
    with pytest.raises(ValueError, match="variant"):
        TruthConfig(variant="fancy")
    with pytest.raises(ValueError, match="distance_power"):
        TruthConfig(distance_power=3)


# ---------------------------------------------------------------- HV


def test_hv_closed_forms():
    z = np.array([0.25, 0.75])
    assert entropy_geometric_variance(z, np.tile(z, (3, 1))) == 0.0
    # 2 sources at squared distance 0.5 each: V=1, H=ln2
    hv = entropy_geometric_variance(np.array([0.5, 0.5]), np.array([[1.0, 0.0], [0.0, 1.0]]))
    assert abs(hv - LN2) < 1e-12


def test_hv_equidistant_closed_form():
    # S equidistant sources with squared distance delta each: HV = S*delta*ln(S)
    rng = np.random.default_rng(9)
    truth = np.full(4, 0.25)
    delta = 0.1
    sources = []
    for _ in range(5):
        d = rng.normal(size=4)
        d -= d.mean()  # stay in the simplex's affine hull
        d *= math.sqrt(delta) / np.linalg.norm(d)
        sources.append(truth + d)
    hv = entropy_geometric_variance(truth, np.array(sources))
    assert abs(hv - 0.5 * math.log(5.0)) < 1e-9


def test_hv_coordinate_permutation_invariance():
    rng = np.random.default_rng(10)
    sources = random_sources(rng, 5, 4)
    truth = sources.mean(axis=0)
    perm = rng.permutation(4)
    a = entropy_geometric_variance(truth, sources)
    b = entropy_geometric_variance(truth[perm], sources[:, perm])
    assert abs(a - b) < 1e-12


# ---------------------------------------------------------------- batch


def test_discover_all_empty_and_single():
    assert discover_all(np.empty((3, 0, 4))) == []
    rng = np.random.default_rng(11)
    preds = rng.dirichlet(np.ones(3), size=(4, 1))
    single = discover_all(preds)
    assert len(single) == 1
    direct = discover_truth(preds[:, 0, :])
    np.testing.assert_allclose(single[0].truth_vector, direct.truth_vector, atol=1e-15)


def test_discover_all_preserves_sample_order():
    rng = np.random.default_rng(12)
    preds = rng.dirichlet(np.ones(4), size=(3, 20))
    results = discover_all(preds)
    perm = rng.permutation(20)
    permuted = discover_all(preds[:, perm, :])
    np.testing.assert_allclose(truth_matrix(results)[perm], truth_matrix(permuted), atol=1e-15)
    np.testing.assert_allclose(hv_values(results)[perm], hv_values(permuted), atol=1e-15)


def test_discover_all_rejects_bad_shape():
    with pytest.raises(ValueError, match="got shape"):
        discover_all(np.zeros((2, 3)))
