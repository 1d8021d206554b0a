"""Segmentation network contract, a tiny default encoder-decoder, head expansion and checkpoints.

Any ``nn.Module`` can be used as a segmentation model if it maps an
``N x 3 x H x W`` tensor to ``N x C x H x W`` logits and exposes ``n_classes``,
``arch_config()`` and ``expand_head(n_new, init)``.
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "endocss-checkpoint/1"


class CheckpointError(RuntimeError):
    pass


def _conv_block(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class TinySegNet(nn.Module):
    """Four strided conv stages with a bilinear top-down decoder.

    Each stage halves the resolution. The decoder projects every stage to
    ``widths[0]`` channels, merges them coarse-to-fine with bilinear
    upsampling, and a 1x1 head produces the class logits.
    """

    def __init__(self, n_classes: int, widths: Sequence[int] = (16, 32, 64, 128), head_init: str = "zero"):
        super().__init__()
        if n_classes < 1:
            raise ValueError("n_classes must be positive")
        self.widths = tuple(int(w) for w in widths)
        self.head_init = head_init
        chans = (3,) + self.widths
        self.stages = nn.ModuleList(_conv_block(chans[i], chans[i + 1], 2) for i in range(len(self.widths)))
        d = self.widths[0]
        self.laterals = nn.ModuleList(nn.Conv2d(w, d, 1) for w in self.widths)
        self.fuse = nn.Sequential(nn.Conv2d(d, d, 3, padding=1, bias=False), nn.BatchNorm2d(d), nn.ReLU(inplace=True))
        self.head = nn.Conv2d(d, n_classes, 1)

    @property
    def n_classes(self) -> int:
        return self.head.out_channels

    def arch_config(self) -> dict[str, Any]:
        return {"name": "tiny", "widths": list(self.widths), "head_init": self.head_init, "n_classes": self.n_classes}

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        size = x.shape[-2:]
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        y = self.laterals[-1](feats[-1])
        for lat, f in zip(reversed(self.laterals[:-1]), reversed(feats[:-1])):
            y = lat(f) + F.interpolate(y, size=f.shape[-2:], mode="bilinear", align_corners=False)
        y = self.fuse(y)
        return F.interpolate(self.head(y), size=size, mode="bilinear", align_corners=False)

    def expand_head(self, n_new: int, init: str | None = None) -> None:
        init = init or self.head_init
        old = self.head
        new = nn.Conv2d(old.in_channels, old.out_channels + n_new, 1)
        with torch.no_grad():
            if init == "zero":
                new.weight.zero_()
                new.bias.zero_()
            elif init != "random":
                raise ValueError(f"unknown head init {init!r}")
            new.weight[: old.out_channels].copy_(old.weight)
            new.bias[: old.out_channels].copy_(old.bias)
        self.head = new.to(old.weight.device, old.weight.dtype)


MODEL_REGISTRY = {"tiny": TinySegNet}


def build_model(n_classes: int, arch: dict[str, Any] | None = None, seed: int | None = None,
                zero_head: bool = False) -> nn.Module:
    """Instantiate a registered architecture.

    ``arch["head_init"]`` governs channels added later by head expansion; the
    initial head uses the default layer init unless ``zero_head`` is set.
    """
    arch = dict(arch or {})
    name = arch.pop("name", "tiny")
    arch.pop("n_classes", None)
    if seed is not None:
        torch.manual_seed(seed)
    model = MODEL_REGISTRY[name](n_classes, **arch)
    if zero_head:
        with torch.no_grad():
            model.head.weight.zero_()
            model.head.bias.zero_()
    return model


def _to_tensor(images) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images) if not isinstance(images, torch.Tensor) else images)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ValueError(f"expected images of shape B x H x W x 3, got {tuple(x.shape)}")
    return x.float().permute(0, 3, 1, 2).contiguous()


def forward_logits(model: nn.Module, images) -> torch.Tensor:
    """Logits of shape B x H x W x C for channel-last images in [0, 1].

    Runs in whatever mode the model is in; gradients flow if enabled.
    """
    x = _to_tensor(images)
    logits = model(x)
    if logits.shape[-2:] != x.shape[-2:]:
        raise ValueError(f"model output {tuple(logits.shape)} does not match input {tuple(x.shape)}")
    return logits.permute(0, 2, 3, 1)


@torch.no_grad()
def predict_probs(model: nn.Module, images, batch_size: int = 32) -> np.ndarray:
    """Per-pixel class probabilities, B x H x W x C, float64."""
    was_training = model.training
    model.eval()
    try:
        images = np.asarray(images) if not isinstance(images, torch.Tensor) else images
        if images.ndim == 3:
            images = images[None]
        out = []
        for i in range(0, len(images), batch_size):
            logits = forward_logits(model, images[i : i + batch_size]).double()
            out.append(torch.softmax(logits, dim=-1).numpy())
        return np.concatenate(out, axis=0)
    finally:
        model.train(was_training)


def predict_masks(model: nn.Module, images, batch_size: int = 32) -> np.ndarray:
    return predict_probs(model, images, batch_size).argmax(axis=-1)


def expand_head(model: nn.Module, n_new_classes: int, init: str | None = None) -> nn.Module:
    """Copy of ``model`` with ``n_new_classes`` extra output channels.

    Existing channels keep their parameters, so their logits are unchanged
    for every input.
    """
    if n_new_classes <= 0:
        raise ValueError(f"n_new_classes must be >= 1, got {n_new_classes}")
    grown = copy.deepcopy(model)
    grown.expand_head(n_new_classes, init)
    return grown


def ensure_outputs(model: nn.Module, n_outputs: int, init: str | None = None) -> nn.Module:
    if model.n_classes > n_outputs:
        raise ValueError(f"model already has {model.n_classes} outputs > {n_outputs}")
    if model.n_classes == n_outputs:
        return model
    return expand_head(model, n_outputs - model.n_classes, init)


def config_hash(config: Any) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    model: nn.Module
    step: int
    seen_classes: list[int]
    config_hash: str | None
    arch: dict[str, Any]


def save_checkpoint(
    model: nn.Module,
    step: int,
    path: str | Path,
    seen_classes: Sequence[int] = (),
    cfg_hash: str | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "arch": model.arch_config(),
        "step": int(step),
        "seen_classes": [int(c) for c in seen_classes],
        "config_hash": cfg_hash,
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path, expected_hash: str | None = None, n_classes_out: int | None = None) -> Checkpoint:
    """Restore a model; optionally grow its head to ``n_classes_out`` after loading."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises several unrelated types on corrupt files
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not an {CHECKPOINT_FORMAT} file")
    if expected_hash is not None and payload["config_hash"] != expected_hash:
        logger.warning("config hash mismatch for %s: %s != %s", path, payload["config_hash"], expected_hash)
    arch = payload["arch"]
    model = build_model(arch["n_classes"], arch)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    if n_classes_out is not None:
        model = ensure_outputs(model, n_classes_out)
    return Checkpoint(model, payload["step"], payload["seen_classes"], payload["config_hash"], arch)
