"""Slum segmentation model: joint BCE + triplet training, prediction, thresholding."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .embedder import DEFAULT_TRIPLET_CAP, EmbedderModel, batch_triplet_loss, mine_triplet_indices
from .geodata import GeoTile, LabeledTile, PoolState, SegMask, augment_for_balance
from .model import Checkpoint, NetConfig, SlumNet, check_tile, state_checksum, tiles_to_tensor

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


@dataclass
class TrainConfig:
    max_epochs: int = 50
    batch_size: int = 8
    lr_seg: float = 1e-3
    lr_emb: float = 1e-5
    margin: float = 0.2
    patience: int = 10
    rng_seed: int = 0
    # epoch cap when continuing from a previous checkpoint; None = max_epochs
    finetune_epochs: Optional[int] = None
    slum_factor: int = 8
    nonslum_factor: int = 1
    freeze_encoder_for_triplet: bool = False
    nonslum_anchors: bool = False
    triplet_cap: int = DEFAULT_TRIPLET_CAP
    # weight on slum pixels in the BCE; 1.0 is the unweighted loss
    pos_weight: float = 1.0
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self):
        if isinstance(self.net, dict):
            self.net = NetConfig.from_json(self.net)
        if self.lr_seg <= 0 or self.lr_emb <= 0:
            raise TrainingError("learning rates must be positive")
        if self.pos_weight <= 0:
            raise TrainingError("pos_weight must be positive")
        if self.batch_size < 2:
            raise TrainingError("batch_size must be >= 2 to form triplets")
        if self.max_epochs < 0:
            raise TrainingError("max_epochs must be >= 0")

    def to_json(self) -> dict:
        d = asdict(self)
        d["net"] = self.net.to_json()
        return d


class SegmenterModel:
    """View of a trained SlumNet that produces per-pixel slum probabilities."""

    def __init__(self, net: SlumNet, checkpoint_id: str = "", tile_size: int = 256):
        self.net = net
        self.checkpoint_id = checkpoint_id
        self.tile_size = tile_size

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "SegmenterModel":
        return cls(ckpt.net, ckpt.checkpoint_id, ckpt.tile_size)

    @torch.no_grad()
    def predict_batch(self, tiles: Sequence[GeoTile], batch_size: int = 16) -> np.ndarray:
        for t in tiles:
            check_tile(t, self.tile_size)
        self.net.eval()
        out = np.zeros((len(tiles), self.tile_size, self.tile_size), dtype=np.float32)
        for i in range(0, len(tiles), batch_size):
            chunk = tiles[i : i + batch_size]
            x = tiles_to_tensor([t.pixels for t in chunk], self.net)
            feats = self.net.encoder(x)
            logits = self.net.segment_features(feats, x.shape[-2:])
            out[i : i + len(chunk)] = torch.sigmoid(logits[:, 0]).float().numpy()
        return out


def predict_mask(model: SegmenterModel, tile: GeoTile) -> np.ndarray:
    return model.predict_batch([tile])[0]


def binarize(prob_map, theta: float = 0.5, source: str = "pseudo") -> SegMask:
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"threshold {theta} outside [0, 1]")
    return SegMask((np.asarray(prob_map) >= theta).astype(np.uint8), source)


@dataclass
class TrainResult:
    segmenter: SegmenterModel
    embedder: EmbedderModel
    checkpoint: Checkpoint


def _batches(stream: list[LabeledTile], batch_size: int, rng: np.random.Generator):
    order = rng.permutation(len(stream))
    for i in range(0, len(order), batch_size):
        idx = order[i : i + batch_size]
        if len(idx) < 2:  # BatchNorm needs more than one sample
            continue
        yield [stream[j] for j in idx]


def _to_tensors(batch: Sequence[LabeledTile], net: SlumNet):
    x = tiles_to_tensor([lt.tile.pixels for lt in batch], net)
    y = torch.from_numpy(np.stack([lt.mask.values for lt in batch]).astype(np.float32)).unsqueeze(1)
    return x, y.to(x.dtype)


@torch.no_grad()
def mean_bce(net: SlumNet, tiles: Sequence[LabeledTile], batch_size: int = 16, pos_weight: float = 1.0) -> float:
    net.eval()
    pw = torch.tensor(pos_weight, dtype=next(net.parameters()).dtype)
    total, count = 0.0, 0
    for i in range(0, len(tiles), batch_size):
        x, y = _to_tensors(tiles[i : i + batch_size], net)
        feats = net.encoder(x)
        logits = net.segment_features(feats, x.shape[-2:])
        total += F.binary_cross_entropy_with_logits(logits, y, reduction="sum", pos_weight=pw).item()
        count += y.numel()
    return total / max(count, 1)


def train_joint(
    pool: PoolState,
    cfg: TrainConfig,
    init: Optional[Checkpoint] = None,
    val: Optional[Sequence[LabeledTile]] = None,
    seed_offset: int = 0,
) -> TrainResult:
    """Train segmentation and embedding paths on the labeled pool.

    Each batch takes one BCE step on the segmentation path (lr_seg), then one
    triplet step on the embedding head and encoder (lr_emb) when the batch
    yields any triplets. The epoch with the lowest validation BCE is kept
    (training BCE when ``val`` is empty). With ``init`` the weights continue
    from that checkpoint and ``cfg.finetune_epochs`` caps the run.
    """
    labeled = list(pool.labeled.values())
    if not labeled:
        raise TrainingError("labeled pool is empty")
    if len({lt.tile.shape for lt in labeled}) != 1 or labeled[0].tile.shape[0] != labeled[0].tile.shape[1]:
        raise TrainingError("labeled tiles must share one square size")
    if len({lt.label for lt in labeled}) < 2:
        raise TrainingError("cannot form triplets: labeled pool holds a single class")

    seed = cfg.rng_seed + seed_offset
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    if init is None:
        net = SlumNet(cfg.net)
        epochs = cfg.max_epochs
    else:
        net = copy.deepcopy(init.net)
        epochs = cfg.max_epochs if cfg.finetune_epochs is None else cfg.finetune_epochs

    opt_seg = torch.optim.Adam(net.seg_parameters(), lr=cfg.lr_seg)
    opt_emb = torch.optim.Adam(net.emb_parameters(not cfg.freeze_encoder_for_triplet), lr=cfg.lr_emb)
    stream = augment_for_balance(labeled, cfg.slum_factor, cfg.nonslum_factor)

    pw = torch.tensor(cfg.pos_weight, dtype=next(net.parameters()).dtype)
    history: list[dict] = []
    best_state, best_loss, stale = copy.deepcopy(net.state_dict()), float("inf"), 0
    for epoch in range(1, epochs + 1):
        net.train()
        bce_sum = trip_sum = 0.0
        n_bce = n_trip = 0
        for batch in _batches(stream, cfg.batch_size, rng):
            x, y = _to_tensors(batch, net)
            logits = net.segment_features(net.encoder(x), x.shape[-2:])
            loss = F.binary_cross_entropy_with_logits(logits, y, pos_weight=pw)
            opt_seg.zero_grad()
            loss.backward()
            opt_seg.step()
            bce_sum += loss.item() * len(batch)
            n_bce += len(batch)

            rows = mine_triplet_indices([lt.label for lt in batch], cfg.triplet_cap, cfg.nonslum_anchors)
            if len(rows):
                with torch.set_grad_enabled(not cfg.freeze_encoder_for_triplet):
                    feats = net.encoder(x)
                emb = net.embed_features(feats)
                t_loss = batch_triplet_loss(emb, rows, cfg.margin)
                opt_emb.zero_grad()
                t_loss.backward()
                opt_emb.step()
                trip_sum += t_loss.item()
                n_trip += 1

        train_bce = bce_sum / max(n_bce, 1)
        val_bce = mean_bce(net, val, pos_weight=cfg.pos_weight) if val else None
        history.append(
            {
                "epoch": epoch,
                "train_bce": train_bce,
                "val_bce": val_bce,
                "train_triplet": trip_sum / n_trip if n_trip else None,
            }
        )
        log.debug("epoch %d train_bce %.4f val_bce %s", epoch, train_bce, val_bce)
        score = val_bce if val_bce is not None else train_bce
        if score < best_loss:
            best_loss, stale = score, 0
            best_state = copy.deepcopy(net.state_dict())
        else:
            stale += 1
            if stale >= cfg.patience:
                break

    net.load_state_dict(best_state)
    net.eval()
    ckpt = Checkpoint(
        net=net,
        checkpoint_id=state_checksum(net),
        config=cfg.to_json(),
        history=history,
        tile_size=labeled[0].tile.shape[0],
    )
    return TrainResult(SegmenterModel.from_checkpoint(ckpt), EmbedderModel.from_checkpoint(ckpt), ckpt)


def write_training_log(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_bce", "val_bce", "train_triplet"])
        for h in history:
            w.writerow([h["epoch"], h["train_bce"], h["val_bce"], h["train_triplet"]])
