import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from certmap.geom import RotoTranslation, quat_to_rotation, random_rotation, rot_z
from certmap.registration import (
    CorrespondenceSet,
    DegenerateGraph,
    GncConfig,
    PairGraph,
    UnobservableRotation,
    build_pair_graph,
    gnc_tls_rotation,
    gnc_tls_translation,
    load_correspondence_frames,
    load_correspondences,
    register,
    rotation_bound_full,
    rotation_bound_sampled,
    rotation_bound_trace,
    sample_star_triples,
    save_correspondences,
    translation_bound,
    wls_matrix,
    wls_objective,
    wls_rotation,
)
from certmap.simworld import SensorNoiseModel, random_registration_problem

QUIET = SensorNoiseModel(fill=0.0)


def problem(seed, count=300, **noise):
    rng = np.random.default_rng(seed)
    return random_registration_problem(rng, count, SensorNoiseModel(**noise))


def fro(a, b):
    return float(np.linalg.norm(a - b))


# ---------------------------------------------------------------- inputs


def test_correspondence_validation():
    a = np.zeros((4, 3))
    with pytest.raises(ValueError):
        CorrespondenceSet(a, a[:3], np.ones(4))
    with pytest.raises(ValueError):
        CorrespondenceSet(a, a, np.zeros(4))
    with pytest.raises(ValueError):
        CorrespondenceSet(a[:3], a[:3], np.ones(3))
    c = CorrespondenceSet(a, a, np.ones(4))
    with pytest.raises(ValueError):
        c.a[0, 0] = 1.0


# ---------------------------------------------------------------- graph


def test_complete_graph_edge_count():
    c, _, _ = problem(0, count=4)
    g = build_pair_graph(c, 1.0)
    assert len(g) == 6
    assert {tuple(sorted(e)) for e in g.edges} == {(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)}


def test_sampled_graph_size_and_determinism():
    c, _, _ = problem(1)
    g1 = build_pair_graph(c, 0.05, rng_seed=7)
    g2 = build_pair_graph(c, 0.05, rng_seed=7)
    assert len(g1) == math.ceil(0.05 * 300 * 299 / 2) == 2243
    assert np.array_equal(g1.edges, g2.edges)
    assert not np.array_equal(g1.edges, build_pair_graph(c, 0.05, rng_seed=8).edges)


@given(st.integers(5, 60), st.floats(0.05, 1.0), st.integers(0, 2**32 - 1))
def test_graph_invariants(n, fraction, seed):
    c, _, _ = random_registration_problem(np.random.default_rng(seed), n, QUIET)
    total = n * (n - 1) // 2
    if math.ceil(fraction * total) < 3:
        return
    g = build_pair_graph(c, fraction, seed)
    assert len(g) == math.ceil(fraction * total)
    assert np.all(g.edges[:, 0] != g.edges[:, 1])
    assert len(np.unique(np.sort(g.edges, axis=1), axis=0)) == len(g)
    assert np.allclose(g.a_ij, c.a[g.edges[:, 0]] - c.a[g.edges[:, 1]])
    assert np.allclose(g.delta_ij, c.delta[g.edges[:, 0]] + c.delta[g.edges[:, 1]])


def test_coincident_points_are_degenerate():
    a = np.tile([1.0, 2.0, 3.0], (5, 1))
    c = CorrespondenceSet(a, a, np.full(5, 0.01))
    with pytest.raises(DegenerateGraph):
        build_pair_graph(c, 1.0)


# ---------------------------------------------------------------- WLS rotation


def test_wls_exact_recovery(rng):
    for seed in range(20):
        c, truth, _ = problem(seed, count=50, fill=0.0)
        g = build_pair_graph(c, 0.3, seed)
        q = wls_rotation(g, np.ones(len(g)))
        assert fro(quat_to_rotation(q), truth.rotation) < 1e-9


def test_wls_matrix_is_symmetric_and_objective_identity():
    c, truth, _ = problem(3, count=40)
    g = build_pair_graph(c, 0.5)
    w = np.random.default_rng(0).random(len(g))
    q_mat = wls_matrix(g, w)
    assert np.allclose(q_mat, q_mat.T)
    # q^T Q q + sum w(|a|^2 + |b|^2) equals the weighted residual sum for any unit q
    const = float(w @ (np.sum(g.a_ij**2, 1) + np.sum(g.b_ij**2, 1)))
    for q in np.random.default_rng(1).normal(size=(20, 4)):
        q /= np.linalg.norm(q)
        assert q @ q_mat @ q + const == pytest.approx(wls_objective(g, w, quat_to_rotation(q)), rel=1e-9)


def test_wls_beats_random_rotations():
    # independent oracle: the closed form is never beaten by 10^4 random rotations
    c, _, _ = problem(4, count=30)
    g = build_pair_graph(c, 0.2)
    w = np.ones(len(g))
    best = wls_objective(g, w, quat_to_rotation(wls_rotation(g, w)))
    rng = np.random.default_rng(5)
    qs = rng.normal(size=(10_000, 4))
    qs /= np.linalg.norm(qs, axis=1, keepdims=True)
    rs = np.array([quat_to_rotation(q) for q in qs])
    res = g.b_ij[None] - np.einsum("nij,ej->nei", rs, g.a_ij)
    assert best <= np.min(np.einsum("nei,nei->n", res, res)) + 1e-9


@given(st.integers(0, 2**32 - 1))
def test_wls_returns_canonical_unit_quaternion(seed):
    c, _, _ = problem(seed, count=12, outlier_rate=0.25)
    g = build_pair_graph(c, 1.0)
    q = wls_rotation(g, np.random.default_rng(seed).random(len(g)) + 0.01)
    assert abs(np.linalg.norm(q) - 1) < 1e-12
    assert q[3] >= 0


# ---------------------------------------------------------------- GNC


def test_gnc_clean_data_keeps_all_edges():
    c, truth, _ = problem(6)
    g = build_pair_graph(c, 0.05)
    sol = gnc_tls_rotation(g)
    assert sol.converged
    assert np.all(sol.weights > 0.5)
    assert fro(quat_to_rotation(sol.estimate), truth.rotation) < 0.05


def test_gnc_rejects_outliers():
    c, truth, mask = problem(7, outlier_rate=0.05)
    g = build_pair_graph(c, 0.05)
    rot = gnc_tls_rotation(g)
    touches = mask[g.edges[:, 0]] | mask[g.edges[:, 1]]
    assert rot.converged
    assert np.all(rot.weights[touches & (rot.weights > 0.5)] >= 0) and np.mean(rot.weights[touches] < 0.5) > 0.9
    tr = gnc_tls_translation(c, quat_to_rotation(rot.estimate))
    assert np.all(tr.weights[mask] < 0.5)


def tls_cost(g, r):
    res = np.linalg.norm(g.b_ij - g.a_ij @ r.T, axis=1) ** 2
    return float(np.sum(np.minimum(res, g.delta_ij**2)))


def test_gnc_heavy_outliers_stress():
    # 40% outliers: the returned TLS cost must not be worse than the cost of the true rotation
    worse = 0
    for seed in range(10):
        c, truth, _ = problem(100 + seed, outlier_rate=0.4)
        g = build_pair_graph(c, 0.05, seed)
        sol = gnc_tls_rotation(g)
        assert np.all((sol.weights >= 0) & (sol.weights <= 1))
        worse += tls_cost(g, quat_to_rotation(sol.estimate)) > tls_cost(g, truth.rotation) * 1.001
    assert worse <= 1


def test_gnc_config_validation():
    with pytest.raises(ValueError):
        GncConfig(mu_update_factor=1.0)
    with pytest.raises(ValueError):
        GncConfig(max_iterations=0)


# ---------------------------------------------------------------- rotation bounds


def test_full_bound_collinear_is_unobservable():
    a = np.outer(np.arange(1, 6), [1.0, 2.0, 0.5])
    c = CorrespondenceSet(a, a, np.full(5, 0.01))
    g = build_pair_graph(c, 1.0)
    with pytest.raises(UnobservableRotation):
        rotation_bound_full(g, np.eye(3))
    with pytest.raises(UnobservableRotation):
        rotation_bound_sampled(g, np.eye(3), 50)


def test_full_bound_sound_and_vanishes_with_noise(rng):
    for seed in range(30):
        c, truth, _ = problem(200 + seed, count=60)
        g = build_pair_graph(c, 0.3, seed)
        r_hat = quat_to_rotation(wls_rotation(g, np.ones(len(g))))
        assert fro(r_hat, truth.rotation) <= rotation_bound_full(g, r_hat)
    # as delta -> 0 with exact data the bound goes to zero
    c, truth, _ = problem(9, count=60, fill=0.0, delta_fraction=0.0, delta_floor=1e-12)
    g = build_pair_graph(c, 0.3)
    assert rotation_bound_full(g, truth.rotation) < 1e-9


def test_full_bound_closed_form_on_orthogonal_edges():
    # edges along the coordinate axes: A^T A = I, so the bound is sqrt(|z|^2)
    a = np.array([[0, 0, 0], [2.0, 0, 0], [0, 2.0, 0], [0, 0, 2.0]])
    delta = np.full(4, 0.05)
    c = CorrespondenceSet(a, a, delta)
    g = PairGraph.from_edges(c, [(1, 0), (2, 0), (3, 0)])
    z = np.full(3, 0.1 / 2.0)
    assert rotation_bound_full(g, np.eye(3)) == pytest.approx(math.sqrt(2 * z @ z / 2.0))


def test_sampled_bound_trace_matches_three_edge_subgraphs():
    c, truth, _ = problem(10, count=80)
    g = build_pair_graph(c, 0.1)
    r_hat = truth.rotation
    triples = sample_star_triples(g, 200, rng_seed=3)
    trace = rotation_bound_trace(g, r_hat, 200, rng_seed=3)
    assert np.all(np.diff(trace) <= 0)
    per = []
    for tri in triples:
        assert len({*g.edges[tri[0]]} & {*g.edges[tri[1]]} & {*g.edges[tri[2]]}) == 1
        try:
            per.append(rotation_bound_full(g.subgraph(tri), r_hat))
        except UnobservableRotation:
            per.append(np.inf)
    assert np.allclose(trace, np.minimum.accumulate(per), rtol=1e-12)


def test_sampling_is_prefix_consistent():
    c, truth, _ = problem(11)
    g = build_pair_graph(c, 0.05)
    long = rotation_bound_trace(g, truth.rotation, 1000, rng_seed=4)
    short = rotation_bound_trace(g, truth.rotation, 100, rng_seed=4)
    assert np.array_equal(long[:100], short)


@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.05))
def test_rotation_bounds_sound_property(seed, frac):
    c, truth, _ = problem(seed, count=40, delta_fraction=frac)
    g = build_pair_graph(c, 0.5, seed)
    r_hat = quat_to_rotation(wls_rotation(g, np.ones(len(g))))
    err = fro(r_hat, truth.rotation)
    assert err <= rotation_bound_full(g, r_hat) + 1e-12
    assert err <= rotation_bound_sampled(g, r_hat, 200, seed) + 1e-12


# ---------------------------------------------------------------- translation


def test_translation_exact_and_pure_translation():
    c, truth, _ = problem(12, fill=0.0)
    sol = gnc_tls_translation(c, truth.rotation)
    assert np.linalg.norm(sol.estimate - truth.translation) < 1e-12
    rng = np.random.default_rng(13)
    a = rng.uniform(-2, 2, (100, 3))
    delta = np.full(100, 0.02)
    noise = rng.normal(size=(100, 3))
    noise *= (rng.random(100) * 0.02 / np.linalg.norm(noise, axis=1))[:, None]
    c = CorrespondenceSet(a, a + [0.3, -0.1, 0.2] + noise, delta)
    t = gnc_tls_translation(c, np.eye(3)).estimate
    assert np.linalg.norm(t - [0.3, -0.1, 0.2]) <= delta.max()


def test_translation_bound_formula():
    c, truth, _ = problem(14)
    r = truth.rotation
    t = truth.translation
    phi = np.linalg.norm(c.b - c.a @ r.T - t, axis=1)
    expected = np.min(0.01 * np.linalg.norm(c.a, axis=1) + phi + c.delta)
    assert translation_bound(c, r, t, 0.01) == pytest.approx(expected)
    # with a perfect rotation the bound collapses to min_i (|phi_i| + delta_i)
    assert translation_bound(c, r, t, 0.0) == pytest.approx(np.min(phi + c.delta))


# ---------------------------------------------------------------- end to end


def test_register_identity_and_determinism():
    rng = np.random.default_rng(15)
    a = rng.uniform(-3, 3, (200, 3)) + [0, 0, 4]
    c = CorrespondenceSet(a, a.copy(), np.full(200, 1e-3))
    res = register(c)
    assert fro(res.rotation_estimate, np.eye(3)) < 1e-9
    assert np.linalg.norm(res.translation_estimate) < 1e-9
    c2, _, _ = problem(16, outlier_rate=0.02)
    r1, r2 = register(c2, rng_seed=3), register(c2, rng_seed=3)
    assert np.array_equal(r1.rotation_estimate, r2.rotation_estimate)
    assert np.array_equal(r1.translation_estimate, r2.translation_estimate)
    assert r1.epsilon_r == r2.epsilon_r and r1.epsilon_t == r2.epsilon_t


def test_register_operating_point():
    for seed in range(10):
        c, truth, _ = problem(300 + seed)
        res = register(c, rng_seed=seed)
        assert res.converged
        assert fro(res.rotation_estimate, truth.rotation) <= res.epsilon_r
        assert np.linalg.norm(res.translation_estimate - truth.translation) <= res.epsilon_t
        assert res.transform.allclose(RotoTranslation(res.rotation_estimate, res.translation_estimate))


def test_register_labels_failing_stage():
    a = np.tile([1.0, 2.0, 3.0], (6, 1))
    with pytest.raises(DegenerateGraph) as info:
        register(CorrespondenceSet(a, a, np.full(6, 0.01)))
    assert info.value.stage == "build_pair_graph"


def test_text_io_round_trip(tmp_path):
    c, _, _ = problem(17, count=20)
    p = tmp_path / "pairs.txt"
    save_correspondences(p, c, header="frame pair")
    back = load_correspondences(p)
    assert np.array_equal(back.a, c.a) and np.array_equal(back.b, c.b) and np.array_equal(back.delta, c.delta)
    bad = tmp_path / "bad.txt"
    bad.write_text("# header\n1 2 3 4 5 6 0.1\n1 2 3\n")
    with pytest.raises(ValueError, match="bad.txt:3"):
        load_correspondences(bad)


def test_multi_frame_file(tmp_path):
    rows = "\n".join(f"{i} 0 1 {i} 0 1 0.01" for i in range(4))
    p = tmp_path / "frames.txt"
    p.write_text(f"# frame 1\n{rows}\n# frame 2\n{rows}\n{rows}\n")
    frames = load_correspondence_frames(p)
    assert sorted(frames) == [1, 2]
    assert len(frames[1]) == 4 and len(frames[2]) == 8


def test_rotation_about_z_example():
    a = np.array([[1.0, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1], [2, -1, 0.5]])
    r = rot_z(math.radians(30))
    c = CorrespondenceSet(a, a @ r.T, np.full(5, 1e-6))
    g = build_pair_graph(c, 1.0)
    assert fro(quat_to_rotation(wls_rotation(g, np.ones(len(g)))), r) < 1e-9
    assert random_rotation(np.random.default_rng(0)).shape == (3, 3)
