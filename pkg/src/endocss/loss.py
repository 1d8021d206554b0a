"""Cross-entropy and the self-adaptive noisy cross-entropy (SAN-CE) loss.

SAN-CE multiplies every logit of sample ``m`` by

    lambda_m = 1 + cur_step * (mu + sigma * |xi_m|),   xi_m ~ N(0, 1)

before the usual pixel-wise cross-entropy. One ``xi`` is drawn per sample
per forward pass, so the scaling is uniform over a sample's pixels and
never changes its predicted classes. With ``mu = 0`` the multiplier is at
least 1, which sharpens the softmax as training moves to later steps.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .datamodel import IGNORE_INDEX

logger = logging.getLogger(__name__)


@dataclass
class SanCEConfig:
    mu: float = 0.0
    sigma: float = 0.1
    cur_step: int = 0
    ignore_index: int = IGNORE_INDEX
    step_indexing: str = "zero"  # "zero": first task has cur_step 0; "one": first task has 1

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.cur_step < 0:
            raise ValueError(f"cur_step must be >= 0, got {self.cur_step}")
        if self.step_indexing not in ("zero", "one"):
            raise ValueError(f"step_indexing must be 'zero' or 'one', got {self.step_indexing!r}")

    def at_task(self, task_index: int) -> "SanCEConfig":
        """Config for 0-based protocol step ``task_index``."""
        step = task_index + (1 if self.step_indexing == "one" else 0)
        return SanCEConfig(self.mu, self.sigma, step, self.ignore_index, self.step_indexing)


def _check_targets(targets: torch.Tensor, n_classes: int, ignore_index: int) -> None:
    bad = (targets != ignore_index) & ((targets < 0) | (targets >= n_classes))
    if bool(bad.any()):
        vals = torch.unique(targets[bad]).tolist()
        raise ValueError(f"target ids {vals[:5]} outside 0..{n_classes - 1} and != ignore_index {ignore_index}")


def ce_loss(logits: torch.Tensor, targets: torch.Tensor, ignore_index: int = IGNORE_INDEX):
    """Mean pixel cross-entropy over non-ignored pixels.

    ``logits`` is ``B x H x W x C`` (class axis last) and ``targets`` is
    ``B x H x W``. Returns ``(scalar, per_pixel)`` where ignored pixels hold 0
    in ``per_pixel``. If every pixel is ignored the scalar is 0 (still
    attached to the graph).
    """
    logits = torch.as_tensor(logits)
    targets = torch.as_tensor(targets).long()
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and targets {tuple(targets.shape)} disagree")
    _check_targets(targets, logits.shape[-1], ignore_index)
    valid = targets != ignore_index
    logp = F.log_softmax(logits, dim=-1)
    safe = torch.where(valid, targets, torch.zeros_like(targets))
    per_pixel = -logp.gather(-1, safe.unsqueeze(-1)).squeeze(-1) * valid
    n_valid = int(valid.sum())
    if n_valid == 0:
        logger.warning("all target pixels are ignore_index; loss is 0")
        return logits.sum() * 0.0, per_pixel
    return per_pixel.sum() / n_valid, per_pixel


def noise_multipliers(n: int, config: SanCEConfig, rng: Optional[np.random.Generator] = None,
                      xi: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-sample multipliers ``1 + cur_step * (mu + sigma * |xi|)``.

    ``xi`` pins the standard-normal draws; otherwise they come from ``rng``.
    """
    if xi is None:
        rng = rng if rng is not None else np.random.default_rng()
        xi = rng.standard_normal(n)
    xi = np.asarray(xi, dtype=np.float64).reshape(n)
    return 1.0 + config.cur_step * (config.mu + config.sigma * np.abs(xi))


def san_scale(logits: torch.Tensor, config: SanCEConfig, rng: Optional[np.random.Generator] = None,
              xi: Optional[np.ndarray] = None) -> torch.Tensor:
    """Scale each sample's logits by its noise multiplier (batch axis first)."""
    logits = torch.as_tensor(logits)
    lam = noise_multipliers(logits.shape[0], config, rng, xi)
    lam_t = torch.as_tensor(lam, dtype=logits.dtype, device=logits.device)
    return logits * lam_t.view(-1, *([1] * (logits.ndim - 1)))


def sance_loss(logits: torch.Tensor, targets: torch.Tensor, config: SanCEConfig,
               rng: Optional[np.random.Generator] = None, xi: Optional[np.ndarray] = None) -> torch.Tensor:
    return ce_loss(san_scale(logits, config, rng, xi), targets, config.ignore_index)[0]


def sance_grad(logits: np.ndarray, targets: np.ndarray, config: SanCEConfig, xi: np.ndarray) -> np.ndarray:
    """Closed-form gradient of :func:`sance_loss` w.r.t. the unscaled logits.

    For a non-ignored pixel of sample ``m`` with target ``y``,
    ``d loss / d x_c = lambda_m * (softmax(lambda_m * x)_c - [c == y]) / N``
    where ``N`` counts non-ignored pixels; ignored pixels get zero gradient.
    """
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets)
    lam = noise_multipliers(x.shape[0], config, xi=xi).reshape(-1, *([1] * (x.ndim - 1)))
    z = lam * x
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    valid = y != config.ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        return np.zeros_like(x)
    onehot = np.zeros_like(x)
    idx = np.where(valid, y, 0)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    return lam * (p - onehot) * valid[..., None] / n_valid
