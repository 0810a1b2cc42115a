"""Residual-encoder U-Net with an embedding head on the bottleneck."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geodata import GeoTile

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class NetConfig:
    backbone: str = "tiny"
    widths: tuple[int, ...] = (12, 16, 24, 32, 48)
    decoder_widths: tuple[int, ...] = (8, 16, 24, 32)
    head_sizes: tuple[int, ...] = (512, 256, 64)
    pretrained: bool = False

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, d: dict) -> "NetConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def conv_bn_relu(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)), inplace=True)
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return F.relu(out + identity, inplace=True)


class TinyResEncoder(nn.Module):
    """Five-level residual encoder at strides 2, 4, 8, 16, 32."""

    def __init__(self, widths: Sequence[int]):
        super().__init__()
        self.stem = conv_bn_relu(3, widths[0], stride=2)
        self.layers = nn.ModuleList(
            BasicBlock(widths[i - 1], widths[i], stride=2) for i in range(1, len(widths))
        )
        self.channels = tuple(widths)

    def forward(self, x) -> list[torch.Tensor]:
        feats = [self.stem(x)]
        for layer in self.layers:
            feats.append(layer(feats[-1]))
        return feats


class ResNet34Encoder(nn.Module):
    def __init__(self, pretrained: bool = False):
        super().__init__()
        from torchvision.models import ResNet34_Weights, resnet34

        net = resnet34(weights=ResNet34_Weights.IMAGENET1K_V1 if pretrained else None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu)
        self.pool = net.maxpool
        self.layers = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])
        self.channels = (64, 64, 128, 256, 512)

    def forward(self, x) -> list[torch.Tensor]:
        feats = [self.stem(x)]
        x = self.pool(feats[0])
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return feats


def build_encoder(cfg: NetConfig) -> nn.Module:
    if cfg.backbone == "tiny":
        return TinyResEncoder(cfg.widths)
    if cfg.backbone == "resnet34":
        return ResNet34Encoder(cfg.pretrained)
    raise ValueError(f"unknown backbone {cfg.backbone!r}")


class SlumNet(nn.Module):
    """Encoder shared by a U-Net decoder (per-pixel logits) and an MLP embedding head."""

    def __init__(self, cfg: Optional[NetConfig] = None):
        super().__init__()
        self.cfg = cfg or NetConfig()
        self.encoder = build_encoder(self.cfg)
        enc = self.encoder.channels
        dec = self.cfg.decoder_widths
        if len(dec) != len(enc) - 1:
            raise ValueError("need one decoder width per skip level")
        blocks = []
        cin = enc[-1]
        for i in reversed(range(len(dec))):
            blocks.append(conv_bn_relu(cin + enc[i], dec[i]))
            cin = dec[i]
        self.decoder = nn.ModuleList(blocks)
        self.seg_head = nn.Conv2d(dec[0], 1, 1)

        layers: list[nn.Module] = []
        cin = enc[-1]
        for j, size in enumerate(self.cfg.head_sizes):
            layers.append(nn.Linear(cin, size))
            if j < len(self.cfg.head_sizes) - 1:
                layers.append(nn.ReLU(inplace=True))
            cin = size
        self.emb_head = nn.Sequential(*layers)
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))

    @property
    def embedding_dim(self) -> int:
        return self.cfg.head_sizes[-1]

    def normalize(self, x):
        return (x - self.mean) / self.std

    def segment_features(self, feats, size) -> torch.Tensor:
        x = feats[-1]
        for block, skip in zip(self.decoder, reversed(feats[:-1])):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skip], dim=1))
        logits = self.seg_head(x)
        return F.interpolate(logits, size=size, mode="bilinear", align_corners=False)

    def embed_features(self, feats) -> torch.Tensor:
        pooled = F.adaptive_avg_pool2d(feats[-1], 1).flatten(1)
        return self.emb_head(pooled)

    def forward(self, x):
        """Return ``(logits, embeddings)`` for a normalized NCHW batch."""
        feats = self.encoder(x)
        return self.segment_features(feats, x.shape[-2:]), self.embed_features(feats)

    def seg_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith("emb_head.")]

    def emb_parameters(self, include_encoder: bool = True):
        params = list(self.emb_head.parameters())
        if include_encoder:
            params += list(self.encoder.parameters())
        return params


def tiles_to_tensor(pixels: Sequence[np.ndarray], net: SlumNet) -> torch.Tensor:
    arr = np.stack([np.asarray(p) for p in pixels]).astype(np.float32) / 255.0
    t = torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()
    dtype = next(net.parameters()).dtype
    return net.normalize(t.to(dtype))


def state_checksum(net: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in net.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def check_tile(tile: GeoTile, size: Optional[int] = None) -> None:
    shape = np.shape(tile.pixels)
    if len(shape) != 3 or shape[2] != 3 or (size is not None and shape[:2] != (size, size)):
        raise ValueError(f"expected a {size}x{size}x3 tile, got {shape}")


@dataclass
class Checkpoint:
    """A trained network plus its provenance."""

    net: SlumNet
    checkpoint_id: str
    config: dict = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    tile_size: int = 256

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({"net_config": self.net.cfg.to_json(), "state_dict": self.net.state_dict()}, path)
        meta = {
            "checkpoint_id": self.checkpoint_id,
            "net_config": self.net.cfg.to_json(),
            "config": self.config,
            "epochs": self.history,
            "tile_size": self.tile_size,
        }
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, path: Path) -> "Checkpoint":
        path = Path(path)
        blob = torch.load(path, map_location="cpu", weights_only=True)
        net = SlumNet(NetConfig.from_json(blob["net_config"]))
        net.load_state_dict(blob["state_dict"])
        net.eval()
        meta_path = path.with_suffix(".json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        return cls(
            net=net,
            checkpoint_id=meta.get("checkpoint_id", state_checksum(net)),
            config=meta.get("config", {}),
            history=meta.get("epochs", []),
            tile_size=meta.get("tile_size", 256),
        )
