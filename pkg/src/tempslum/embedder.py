"""Embedding head utilities: triplet objective, in-batch mining, embedding extraction."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .geodata import GeoTile, LabeledTile
from .model import Checkpoint, SlumNet, check_tile, tiles_to_tensor

DEFAULT_TRIPLET_CAP = 64


@dataclass
class Triplet:
    anchor: LabeledTile
    positive: LabeledTile
    negative: LabeledTile


class EmbedderModel:
    """View of a trained SlumNet that produces embedding vectors."""

    def __init__(self, net: SlumNet, checkpoint_id: str = "", tile_size: int = 256):
        self.net = net
        self.checkpoint_id = checkpoint_id
        self.tile_size = tile_size

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "EmbedderModel":
        return cls(ckpt.net, ckpt.checkpoint_id, ckpt.tile_size)

    @torch.no_grad()
    def embed_batch(self, tiles: Sequence[GeoTile], batch_size: int = 32) -> np.ndarray:
        for t in tiles:
            check_tile(t, self.tile_size)
        self.net.eval()
        out = np.zeros((len(tiles), self.net.embedding_dim), dtype=np.float64)
        for i in range(0, len(tiles), batch_size):
            chunk = tiles[i : i + batch_size]
            x = tiles_to_tensor([t.pixels for t in chunk], self.net)
            feats = self.net.encoder(x)
            out[i : i + len(chunk)] = self.net.embed_features(feats).double().numpy()
        return out


def embed(model: EmbedderModel, tile: GeoTile) -> np.ndarray:
    return model.embed_batch([tile])[0]


def triplet_loss(e_a, e_p, e_n, m: float) -> float:
    """``max(|a - p| - |a - n| + m, 0)`` with Euclidean distances."""
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (e_a, e_p, e_n))
    if not (a.shape == p.shape == n.shape) or a.ndim != 1:
        raise ValueError(f"embedding dimensions differ: {a.shape}, {p.shape}, {n.shape}")
    if m < 0:
        raise ValueError("margin must be non-negative")
    return max(float(np.linalg.norm(a - p) - np.linalg.norm(a - n) + m), 0.0)


def triplet_loss_grad(e_a, e_p, e_n, m: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Subgradient of :func:`triplet_loss` with respect to each input."""
    a, p, n = (np.asarray(v, dtype=np.float64) for v in (e_a, e_p, e_n))
    d_ap, d_an = a - p, a - n
    na, nn_ = np.linalg.norm(d_ap), np.linalg.norm(d_an)
    zero = np.zeros_like(a)
    if na - nn_ + m <= 0:
        return zero, zero, zero
    u_ap = d_ap / na if na > 0 else zero
    u_an = d_an / nn_ if nn_ > 0 else zero
    return u_ap - u_an, -u_ap, u_an


def batch_triplet_loss(emb: torch.Tensor, triplets: np.ndarray, m: float) -> torch.Tensor:
    """Mean triplet loss over ``(anchor, positive, negative)`` index rows."""
    idx = torch.as_tensor(triplets, dtype=torch.long)
    a, p, n = emb[idx[:, 0]], emb[idx[:, 1]], emb[idx[:, 2]]
    d_ap = torch.linalg.vector_norm(a - p, dim=1)
    d_an = torch.linalg.vector_norm(a - n, dim=1)
    return torch.clamp(d_ap - d_an + m, min=0).mean()


def mine_triplet_indices(labels: Sequence[int], cap: Optional[int] = DEFAULT_TRIPLET_CAP, nonslum_anchors: bool = False) -> np.ndarray:
    labels = list(labels)
    rows = []
    anchor_classes = (1, 0) if nonslum_anchors else (1,)
    for cls in anchor_classes:
        same = [i for i, y in enumerate(labels) if y == cls]
        other = [i for i, y in enumerate(labels) if y != cls]
        for a in same:
            for p in same:
                if p == a:
                    continue
                for n in other:
                    rows.append((a, p, n))
                    if cap is not None and len(rows) >= cap:
                        return np.asarray(rows, dtype=np.int64)
    return np.asarray(rows, dtype=np.int64).reshape(-1, 3)


def mine_triplets(batch: Sequence[LabeledTile], cap: Optional[int] = DEFAULT_TRIPLET_CAP, nonslum_anchors: bool = False) -> list[Triplet]:
    """All (anchor, positive, negative) combinations in ``batch``, slum-anchored.

    Enumeration order is anchor, then positive, then negative, each in batch
    order; the list is cut at ``cap``.
    """
    rows = mine_triplet_indices([lt.label for lt in batch], cap, nonslum_anchors)
    return [Triplet(batch[a], batch[p], batch[n]) for a, p, n in rows]


class EmbeddingCache:
    """Embeddings stored as raw float32 records with a JSON index.

    The cache is only valid for the checkpoint that produced it.
    """

    def __init__(self, root: Path):
        self.root = Path(root)
        self.bin_path = self.root / "embeddings.bin"
        self.index_path = self.root / "embeddings.json"

    def save(self, checkpoint_id: str, tile_ids: Sequence[str], vectors: np.ndarray) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        vectors = np.ascontiguousarray(vectors, dtype="<f4")
        self.bin_path.write_bytes(vectors.tobytes())
        index = {"checkpoint_id": checkpoint_id, "dim": int(vectors.shape[1]), "tile_ids": list(tile_ids)}
        self.index_path.write_text(json.dumps(index))

    def load(self, checkpoint_id: str) -> Optional[tuple[list[str], np.ndarray]]:
        if not self.index_path.exists():
            return None
        index = json.loads(self.index_path.read_text())
        if index["checkpoint_id"] != checkpoint_id:
            return None
        vecs = np.frombuffer(self.bin_path.read_bytes(), dtype="<f4").reshape(-1, index["dim"])
        return index["tile_ids"], vecs.astype(np.float64)

    def get_or_compute(self, model: EmbedderModel, tiles: Sequence[GeoTile]) -> np.ndarray:
        ids = [t.tile_id for t in tiles]
        hit = self.load(model.checkpoint_id)
        if hit is not None:
            cached_ids, vecs = hit
            pos = {t: i for i, t in enumerate(cached_ids)}
            if all(t in pos for t in ids):
                return vecs[[pos[t] for t in ids]]
        vecs = model.embed_batch(tiles)
        self.save(model.checkpoint_id, ids, vecs)
        return vecs.astype("<f4").astype(np.float64)
