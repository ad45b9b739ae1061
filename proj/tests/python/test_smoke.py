import math

import numpy as np
import pytest

import ctxtrack


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(0)
    from itertools import permutations

    for _ in range(50):
        cost = rng.uniform(-5, 5, size=(4, 4))
        got = ctxtrack.hungarian(cost)
        best = min(permutations(range(4)), key=lambda p: sum(cost[i, p[i]] for i in range(4)))
        assert sum(cost[i, got[i]] for i in range(4)) == pytest.approx(sum(cost[i, best[i]] for i in range(4)))


def test_hungarian_rectangular_leaves_rows_unmatched():
    got = ctxtrack.hungarian(np.array([[0.0], [1.0], [2.0]]))
    assert got == [0, None, None]


def test_contrastive_identities():
    v = np.array([[1.0, 0.0]])
    assert ctxtrack.contrastive_loss(v, np.array([[1.0, 0.0]]), np.zeros((0, 2))) == 0.0
    sym = ctxtrack.contrastive_loss(v, np.array([[0.3, 1.0]]), np.array([[0.3, -1.0]]))
    assert abs(sym - math.log(2)) <= 1e-12


def test_boundary_band_of_square():
    m = np.zeros((7, 7))
    m[2:5, 2:5] = 1
    band = ctxtrack.boundary_band(m)
    assert band.sum() == 12
    assert (band * m).sum() == 0


def test_surrounding_embedding_reads_constant_features():
    feats = np.tile(np.arange(1.0, 4.0), (10, 10, 1))
    masks = np.zeros((1, 10, 10))
    masks[0, 3:6, 3:6] = 1
    out = ctxtrack.surrounding_embedding(feats, masks, kernel_size=1)
    np.testing.assert_allclose(out, [[1.0, 2.0, 3.0]], rtol=1e-14)


def test_fusion_is_row_equivariant():
    head = ctxtrack.init_context_head(channels=4, seed=3)
    rng = np.random.default_rng(1)
    core, sur = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    perm = rng.permutation(5)
    fused = ctxtrack.fuse_context(core, sur, head)
    np.testing.assert_allclose(ctxtrack.fuse_context(core[perm], sur[perm], head), fused[perm], atol=1e-12)


def test_align_context_recovers_permutation():
    rng = np.random.default_rng(2)
    q, _ = np.linalg.qr(rng.normal(size=(8, 5)))
    q = q.T
    sur = rng.normal(size=(5, 8))
    perm = rng.permutation(5)
    ordered = np.empty_like(q)
    ordered[perm] = q
    aligned, det_to_slot = ctxtrack.align_context(ordered, q, sur)
    assert det_to_slot == list(perm)
    expected = np.empty_like(sur)
    expected[perm] = sur
    np.testing.assert_array_equal(aligned, expected)


def test_cross_attention_rows_are_convex_combinations():
    rng = np.random.default_rng(3)
    v = rng.normal(size=(4, 3))
    out = ctxtrack.context_cross_attention(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), v)
    assert np.all(out <= v.max(axis=0) + 1e-12)
    assert np.all(out >= v.min(axis=0) - 1e-12)


def test_twin_scenario_shapes_and_determinism(tmp_path):
    s = ctxtrack.twin_scenario(3)
    assert len(s["frames"]) == 12
    f = s["frames"][0]
    assert f["features"].shape == (64, 64, 16)
    assert f["core"].shape == (8, 16)
    assert f["masks"].shape == (8, 64, 64)
    assert s["separability"] < 0.1
    again = ctxtrack.twin_scenario(3)
    np.testing.assert_array_equal(again["frames"][5]["core"], s["frames"][5]["core"])
    path = tmp_path / "video.ctxs"
    ctxtrack.save_twin_scenario(3, str(path))
    loaded = ctxtrack.load_scenario(str(path))
    np.testing.assert_array_equal(loaded["frames"][5]["masks"], s["frames"][5]["masks"])


def test_config_validation():
    text = ctxtrack.canonical_config("{}")
    assert ctxtrack.canonical_config(text) == text
    assert len(ctxtrack.config_hash(text)) == 16
    with pytest.raises(ctxtrack.ConfigError, match="model.chanels"):
        ctxtrack.canonical_config('{"model": {"chanels": 4}}')


def test_oracle_evaluation_is_perfect():
    res = ctxtrack.evaluate('{"scenario": {"eval_videos": 2}}', tracker="oracle")
    assert res["accuracy"] == 1.0
    assert res["id_switches"] == 0.0
