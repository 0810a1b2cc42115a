from __future__ import annotations

import numpy as np
import pytest
import torch

from conftest import blob_tile
from oracles import triplet_loss_ref
from tempslum.embedder import (
    EmbedderModel,
    EmbeddingCache,
    batch_triplet_loss,
    embed,
    mine_triplet_indices,
    mine_triplets,
    triplet_loss,
    triplet_loss_grad,
)
from tempslum.model import NetConfig, SlumNet


class TestTripletLoss:
    def test_margin_satisfied(self):
        a = np.zeros(8)
        n = np.zeros(8)
        n[0] = 0.4
        assert triplet_loss(a, a, n, 0.2) == 0.0

    def test_equidistant(self, rng):
        a, p = rng.normal(size=16), rng.normal(size=16)
        assert triplet_loss(a, p, p, 0.2) == pytest.approx(0.2, abs=1e-15)

    def test_hand_arithmetic(self):
        a = np.zeros(4)
        p = np.array([1.0, 0, 0, 0])
        n = np.array([0.5, 0, 0, 0])
        assert triplet_loss(a, p, n, 0.2) == pytest.approx(0.7, abs=1e-15)

    def test_matches_reference(self, rng):
        for _ in range(50):
            a, p, n = rng.normal(size=(3, 12))
            assert triplet_loss(a, p, n, 0.3) == pytest.approx(triplet_loss_ref(a, p, n, 0.3), abs=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            triplet_loss(np.zeros(3), np.zeros(4), np.zeros(3), 0.2)
        with pytest.raises(ValueError):
            triplet_loss(np.zeros(3), np.zeros(3), np.zeros(3), -0.1)

    def test_grad_zero_when_hinge_inactive(self):
        a = np.zeros(3)
        n = np.array([5.0, 0, 0])
        assert all(np.all(g == 0) for g in triplet_loss_grad(a, a, n, 0.2))

    def test_torch_batch_agrees(self, rng):
        emb = rng.normal(size=(5, 6))
        rows = mine_triplet_indices([1, 1, 0, 1, 0], cap=None)
        want = np.mean([triplet_loss(emb[a], emb[p], emb[n], 0.2) for a, p, n in rows])
        got = batch_triplet_loss(torch.from_numpy(emb), rows, 0.2).item()
        assert got == pytest.approx(want, abs=1e-12)


class TestMining:
    def test_two_slum_one_non(self):
        rows = mine_triplet_indices([1, 1, 0])
        assert rows.tolist() == [[0, 1, 2], [1, 0, 2]]

    def test_all_nonslum(self):
        assert len(mine_triplet_indices([0, 0, 0])) == 0
        assert mine_triplets([blob_tile("a", False), blob_tile("b", False)]) == []

    def test_three_by_two(self):
        rows = mine_triplet_indices([1, 0, 1, 0, 1], cap=None)
        assert len(rows) == 3 * 2 * 2
        assert len({tuple(r) for r in rows}) == 12

    def test_cap(self):
        rows = mine_triplet_indices([1] * 6 + [0] * 4, cap=64)
        assert len(rows) == 64
        assert rows[0].tolist() == [0, 1, 6]

    def test_nonslum_anchors(self):
        # 2*1*2 slum-anchored plus 2*1*2 non-slum-anchored
        assert len(mine_triplet_indices([1, 1, 0, 0], cap=None, nonslum_anchors=True)) == 8

    def test_triplet_objects(self):
        batch = [blob_tile("s1", True), blob_tile("s2", True, seed=1), blob_tile("n", False)]
        trips = mine_triplets(batch)
        assert [(t.anchor.tile_id, t.positive.tile_id, t.negative.tile_id) for t in trips] == [
            ("s1", "s2", "n"), ("s2", "s1", "n")
        ]


@pytest.fixture(scope="module")
def small_embedder():
    torch.manual_seed(0)
    return EmbedderModel(SlumNet(NetConfig()), "abc", tile_size=64)


class TestEmbedding:
    def test_shape_finite(self, small_embedder):
        v = embed(small_embedder, blob_tile("x", True).tile)
        assert v.shape == (64,) and np.isfinite(v).all()

    def test_repeatable(self, small_embedder):
        t = blob_tile("x", True).tile
        np.testing.assert_array_equal(embed(small_embedder, t), embed(small_embedder, t))

    def test_batch_matches_single(self, small_embedder):
        tiles = [blob_tile(f"t{i}", i % 2 == 0, seed=i).tile for i in range(3)]
        batch = small_embedder.embed_batch(tiles)
        np.testing.assert_allclose(batch[1], embed(small_embedder, tiles[1]), atol=1e-5)

    def test_wrong_size(self, small_embedder):
        with pytest.raises(ValueError):
            embed(small_embedder, blob_tile("x", True, size=32).tile)

    def test_cache(self, small_embedder, tmp_path):
        tiles = [blob_tile(f"t{i}", i % 2 == 0, seed=i).tile for i in range(3)]
        cache = EmbeddingCache(tmp_path)
        first = cache.get_or_compute(small_embedder, tiles)
        assert (tmp_path / "embeddings.bin").stat().st_size == 3 * 64 * 4
        assert cache.load("other") is None
        ids, vecs = cache.load("abc")
        assert ids == ["t0", "t1", "t2"]
        np.testing.assert_array_equal(cache.get_or_compute(small_embedder, tiles[::-1]), first[::-1])
