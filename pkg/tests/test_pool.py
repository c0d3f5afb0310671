import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_pool
from protofg3d.errors import ContractError, EmptyClass, FormatMismatch
from protofg3d.pool import (
    EmaConfig,
    PrototypePool,
    assign_clusters,
    class_mean_features,
    ema_update,
    init_prototypes,
    load_pool,
    momentum_at,
    normalize_rows,
    pool_to_bytes,
    save_pool,
    snap_to_nearest_sample,
    spherical_kmeans,
)

NO_RENORM = EmaConfig(eta0=0.5, renormalize=False)


# --- initialization


def test_kmeans_with_exactly_k_points_returns_them(rng):
    X = normalize_rows(rng.normal(size=(5, 8)))
    pool = init_prototypes([(0, X)], K=5, seed=3)
    got = pool.prototypes[0]
    # every input is a prototype, up to ordering
    for x in X:
        assert np.min(np.abs(got - x).max(axis=1)) < 1e-12


def test_single_embedding_is_replicated_with_jitter(rng):
    x = normalize_rows(rng.normal(size=(1, 6)))
    pool = init_prototypes([(0, x)], K=4, seed=0)
    P = pool.prototypes[0]
    assert pool.max_norm_error() < 1e-12
    assert np.all(1.0 - P @ x[0] < 1e-5)
    again = init_prototypes([(0, x)], K=4, seed=0)
    np.testing.assert_array_equal(again.prototypes, pool.prototypes)


def test_two_bumps_recovered(rng):
    means = normalize_rows(rng.normal(size=(2, 10)))
    X = np.concatenate([means[0] + 0.05 * rng.normal(size=(60, 10)), means[1] + 0.05 * rng.normal(size=(60, 10))])
    centroids, labels, history = spherical_kmeans(X, 2, np.random.default_rng(1))
    cos = centroids @ means.T
    assert np.all(1.0 - cos.max(axis=0) < 0.05)
    assert len(set(labels[:60])) == 1 and len(set(labels[60:])) == 1


def test_kmeans_objective_non_increasing(rng):
    X = rng.normal(size=(200, 5))
    _, _, history = spherical_kmeans(X, 6, np.random.default_rng(0))
    assert all(b <= a + 1e-9 for a, b in zip(history, history[1:]))


def test_init_is_deterministic(rng):
    data = [(c, rng.normal(size=(30, 7))) for c in range(3)]
    a = init_prototypes(data, K=4, seed=11)
    b = init_prototypes(data, K=4, seed=11)
    np.testing.assert_array_equal(a.prototypes, b.prototypes)
    assert a.max_norm_error() < 1e-12


def test_init_rejects_empty_class(rng):
    with pytest.raises(EmptyClass):
        init_prototypes([(0, rng.normal(size=(4, 3))), (1, np.zeros((0, 3)))], K=2, seed=0)


# --- cluster means


def test_all_views_to_prototype_zero(rng):
    H = normalize_rows(rng.normal(size=(6, 4)))
    Z = np.zeros((3, 6))
    Z[0] = 1.0
    means, present = class_mean_features(H, Z)
    np.testing.assert_allclose(means[0], H.mean(axis=0), atol=1e-15)
    assert present.tolist() == [True, False, False]
    assert np.all(np.isnan(means[1:]))


def test_two_views_two_prototypes():
    H = np.array([[1.0, 0.0], [0.0, 1.0]])
    means, present = class_mean_features(H, np.eye(2))
    np.testing.assert_array_equal(means, H)


def test_means_match_scalar_loop(rng):
    H = normalize_rows(rng.normal(size=(12, 5)))
    K = 4
    labels = rng.integers(0, K, size=12)
    Z = np.full((K, 12), 0.01)
    Z[labels, np.arange(12)] = 0.9
    means, present = class_mean_features(H, Z)
    for k in range(K):
        members = [H[v] for v in range(12) if labels[v] == k]
        if not members:
            assert not present[k]
            continue
        acc = np.zeros(5)
        for m in members:
            acc += m
        np.testing.assert_allclose(means[k], acc / len(members), atol=1e-12)


def test_soft_means_weight_by_mass(rng):
    H = normalize_rows(rng.normal(size=(4, 3)))
    Z = rng.dirichlet(np.ones(2), size=4).T
    means, _ = class_mean_features(H, Z, soft=True)
    np.testing.assert_allclose(means, (Z @ H) / Z.sum(axis=1, keepdims=True), atol=1e-14)


def test_assign_clusters_ties_lowest_k():
    ca = assign_clusters(np.full((3, 2), 1 / 3))
    assert ca.labels.tolist() == [0, 0]
    assert ca.masses.tolist() == [2.0, 0.0, 0.0]


# --- EMA


def test_eta_one_leaves_pool_unchanged(rng):
    pool = random_pool(rng, 2, 3, 4)
    before = pool.prototypes.copy()
    ema_update(pool, 1, normalize_rows(rng.normal(size=(3, 4))), NO_RENORM, eta=1.0)
    np.testing.assert_array_equal(pool.prototypes, before)


def test_one_step_blend():
    pool = PrototypePool(np.array([[[1.0, 0.0]]]))
    ema_update(pool, 0, np.array([[0.0, 1.0]]), NO_RENORM, eta=0.5)
    np.testing.assert_array_equal(pool.prototypes[0, 0], [0.5, 0.5])


@pytest.mark.parametrize("eta", [0.5, 0.9, 0.99, 0.999])
def test_iterates_equal_geometric_sum(rng, eta):
    q0 = normalize_rows(rng.normal(size=(2, 3)))
    means = [normalize_rows(rng.normal(size=(2, 3))) for _ in range(50)]
    pool = PrototypePool(q0[None].copy())
    for t, m in enumerate(means, start=1):
        ema_update(pool, 0, m, NO_RENORM, eta=eta)
        closed = eta**t * q0 + (1 - eta) * sum(eta ** (t - i) * means[i - 1] for i in range(1, t + 1))
        np.testing.assert_allclose(pool.prototypes[0], closed, atol=1e-10, rtol=0)


def test_absent_rows_untouched(rng):
    pool = random_pool(rng, 1, 3, 4)
    before = pool.prototypes.copy()
    means = normalize_rows(rng.normal(size=(3, 4)))
    means[1] = np.nan
    ema_update(pool, 0, means, EmaConfig(0.9))
    np.testing.assert_array_equal(pool.prototypes[0, 1], before[0, 1])
    assert not np.allclose(pool.prototypes[0, 0], before[0, 0])
    assert pool.max_norm_error() < 1e-12 and pool.steps[0] == 1


def test_momentum_schedule():
    cfg = EmaConfig(eta0=0.9, switch_step=3)
    assert [momentum_at(t, cfg) for t in (1, 3)] == [0.9, 0.9]
    assert momentum_at(4, cfg) == pytest.approx(0.8)
    assert momentum_at(10**6, cfg) == 0.999


def test_ema_config_validation():
    with pytest.raises(ContractError):
        EmaConfig(eta0=1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**20), eta=st.floats(0.01, 0.99))
def test_ema_keeps_unit_norm(seed, eta):
    r = np.random.default_rng(seed)
    pool = random_pool(r, 2, 3, 5)
    for _ in range(5):
        ema_update(pool, 0, normalize_rows(r.normal(size=(3, 5))), EmaConfig(eta))
    assert pool.max_norm_error() < 1e-12


# --- snapping


def test_snap_self_match(rng):
    E = normalize_rows(rng.normal(size=(10, 4)))
    pool = PrototypePool(E[[2, 7]][None].copy())
    snap_to_nearest_sample(pool, 0, E)
    np.testing.assert_array_equal(pool.prototypes[0], E[[2, 7]])
    assert pool.exemplar_ids[0].tolist() == [2, 7]


def test_snap_tie_goes_to_lowest_index():
    E = np.zeros((10, 2))
    E[:, 0] = -1.0
    E[3] = [np.sqrt(0.5), np.sqrt(0.5)]
    E[7] = [np.sqrt(0.5), -np.sqrt(0.5)]
    pool = PrototypePool(np.array([[[1.0, 0.0]]]))
    snap_to_nearest_sample(pool, 0, E)
    assert pool.exemplar_ids[0, 0] == 3


def test_snap_matches_exhaustive_scan(rng):
    pool = random_pool(rng, 3, 4, 6)
    E = normalize_rows(rng.normal(size=(50, 6)))
    expect = []
    for q in pool.prototypes[1]:
        best, best_sim = 0, -np.inf
        for i, e in enumerate(E):
            s = float(q @ e)
            if s > best_sim:
                best, best_sim = i, s
        expect.append(best)
    snap_to_nearest_sample(pool, 1, E, sample_ids=np.arange(50) + 1000)
    assert pool.exemplar_ids[1].tolist() == [1000 + i for i in expect]
    for k, i in enumerate(expect):
        np.testing.assert_array_equal(pool.prototypes[1, k], E[i])


# --- persistence


def test_pool_round_trip_bit_identical(rng, tmp_path):
    pool = random_pool(rng, 3, 5, 7)
    pool.prototypes = pool.prototypes.astype(np.float32).astype(np.float64)
    pool.exemplar_ids[1, 2] = 42
    save_pool(pool, tmp_path / "p.ppool")
    back = load_pool(tmp_path / "p.ppool")
    np.testing.assert_array_equal(back.prototypes, pool.prototypes)
    np.testing.assert_array_equal(back.exemplar_ids, pool.exemplar_ids)
    assert (tmp_path / "p.ppool").read_bytes() == pool_to_bytes(back)


def test_truncated_pool_file(rng, tmp_path):
    path = tmp_path / "p.ppool"
    path.write_bytes(pool_to_bytes(random_pool(rng, 2, 2, 3))[:-5])
    with pytest.raises(FormatMismatch):
        load_pool(path)


def test_version_two_header(rng, tmp_path):
    buf = bytearray(pool_to_bytes(random_pool(rng, 2, 2, 3)))
    buf[5:6] = b"2"
    path = tmp_path / "p.ppool"
    path.write_bytes(bytes(buf))
    with pytest.raises(FormatMismatch, match="1.*2|2.*1"):
        load_pool(path)
