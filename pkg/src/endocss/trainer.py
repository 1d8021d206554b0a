"""Continual training: step-wise training with mini-batch pseudo-replay and SAN-CE, plus reference modes.

Modes:

* ``endocss``  -- replay set rebuilt after each step, MB-PR batches, SAN-CE loss.
* ``finetune`` -- same sequence without replay, plain cross-entropy.
* ``joint``    -- one training run on all classes at once.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import TrainConfig
from .datamodel import Dataset
from .loss import ce_loss, sance_loss
from .metrics import ConfusionMatrix, GroupedReport, grouped_report, reports_to_csv
from .protocol import Protocol, StepView, cumulative_test_set, split_dataset
from .replay import ReplaySet, build_replay_set, make_generator
from .sampler import CurrentStream, ReplayStream, compute_ratio, iter_epoch
from .segmodel import build_model, ensure_outputs, forward_logits, predict_masks, save_checkpoint

logger = logging.getLogger(__name__)

MODES = ("endocss", "finetune", "joint")

# independent random streams per step
_DATA, _AUG, _NOISE, _GEN = range(4)


class TrainingDiverged(RuntimeError):
    pass


def _rng(seed: int, step: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, stream])


def augment_batch(images: np.ndarray, masks: np.ndarray, rng: np.random.Generator, hflip: bool = True,
                  resized_crop: bool = True, scale: tuple[float, float] = (0.5, 1.0),
                  ratio: tuple[float, float] = (3 / 4, 4 / 3)) -> tuple[torch.Tensor, torch.Tensor]:
    """Random horizontal flip and random resized crop, identical for image and mask."""
    imgs = torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2)
    ms = torch.from_numpy(np.ascontiguousarray(masks))
    b, _, h, w = imgs.shape
    out_i, out_m = [], []
    for k in range(b):
        im, m = imgs[k], ms[k]
        if hflip and rng.random() < 0.5:
            im, m = im.flip(-1), m.flip(-1)
        if resized_crop:
            area = h * w * rng.uniform(*scale)
            aspect = math.exp(rng.uniform(math.log(ratio[0]), math.log(ratio[1])))
            ch = min(h, max(1, int(round(math.sqrt(area / aspect)))))
            cw = min(w, max(1, int(round(math.sqrt(area * aspect)))))
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            im = F.interpolate(im[None, :, top : top + ch, left : left + cw], size=(h, w), mode="bilinear",
                               align_corners=False)[0]
            m = F.interpolate(m[None, None, top : top + ch, left : left + cw].float(), size=(h, w),
                              mode="nearest")[0, 0].long()
        out_i.append(im)
        out_m.append(m)
    return torch.stack(out_i).permute(0, 2, 3, 1).contiguous(), torch.stack(out_m)


@dataclass
class StepResult:
    step: int
    report: GroupedReport
    train_size: int
    replay_size: int
    plan: tuple[int, int]
    epoch_losses: list[float]
    checkpoint: str | None = None


@dataclass
class RunRecord:
    mode: str
    protocol: str
    config: dict
    config_hash: str
    steps: list[StepResult] = field(default_factory=list)
    batch_log: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    status: str = "ok"
    error: str | None = None
    model: torch.nn.Module | None = field(default=None, repr=False)
    step_states: list[dict] = field(default_factory=list, repr=False)

    @property
    def reports(self) -> list[GroupedReport]:
        return [s.report for s in self.steps]

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "protocol": self.protocol,
            "config_hash": self.config_hash,
            "status": self.status,
            "error": self.error,
            "wall_clock": self.wall_clock,
            "steps": [
                {"step": s.step, "train_size": s.train_size, "replay_size": s.replay_size, "plan": list(s.plan),
                 "epoch_losses": s.epoch_losses, "checkpoint": s.checkpoint, "groups": s.report.groups}
                for s in self.steps
            ],
        }


def _lr_at(base: float, it: int, total: int, schedule: str) -> float:
    if schedule == "constant":
        return base
    return base * (1 - it / total) ** 0.9


def train_step(
    model: torch.nn.Module,
    step_view: StepView,
    replay_set: ReplaySet | None,
    config: TrainConfig,
    *,
    use_sance: bool = True,
    task_index: int | None = None,
    epochs: int | None = None,
    lr: float | None = None,
    batch_log: list[dict] | None = None,
    extra_loss: Callable[..., torch.Tensor] | None = None,
) -> tuple[torch.nn.Module, list[float]]:
    """Train ``model`` in place on one step and return it with per-epoch mean losses.

    Each batch holds ``S_D`` current and ``S_R`` replay items (S_R = 0 without
    replay), is augmented, and drives one SGD update on the SAN-CE loss (or
    plain CE when ``use_sance`` is false). ``extra_loss(model, images, masks,
    logits)`` is added to the objective when given.
    """
    t = step_view.step_index if task_index is None else task_index
    first = t == 0
    epochs = epochs or (config.epochs_first if first else config.epochs_later)
    lr = lr or (config.lr_first if first else config.lr_later)
    needed = max(step_view.seen_classes, default=0) + 1
    if model.n_classes < needed:
        raise ValueError(f"model head has {model.n_classes} outputs; step {t} needs {needed}")

    current = list(step_view.train_set)
    replay = list(replay_set) if replay_set is not None else []
    plan = compute_ratio(len(current), len(replay), config.batch_size)
    logger.info("step %d: %d current, %d replay, plan S_D=%d S_R=%d", t, len(current), len(replay), plan.s_d, plan.s_r)

    data_rng, aug_rng, noise_rng = _rng(config.seed, t, _DATA), _rng(config.seed, t, _AUG), _rng(config.seed, t, _NOISE)
    torch.manual_seed(config.seed * 1000 + t)
    cur_stream = CurrentStream(len(current), data_rng)
    rep_stream = ReplayStream(len(replay), data_rng) if replay else None
    batches_per_epoch = math.ceil(len(current) / plan.s_d)
    total = epochs * batches_per_epoch
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=config.momentum, weight_decay=config.weight_decay)
    loss_cfg = config.loss.at_task(t)
    ignore = step_view.train_set.ignore_index

    model.train()
    it = 0
    epoch_losses = []
    for epoch in range(epochs):
        running = []
        for b, batch in enumerate(iter_epoch(cur_stream, rep_stream, plan, current, replay)):
            for group in opt.param_groups:
                group["lr"] = _lr_at(lr, it, total, config.lr_schedule)
            images, masks = augment_batch(batch.images, batch.masks, aug_rng, config.hflip, config.resized_crop,
                                          config.crop_scale)
            logits = forward_logits(model, images)
            if use_sance:
                loss = sance_loss(logits, masks, loss_cfg, noise_rng)
            else:
                loss = ce_loss(logits, masks, ignore)[0]
            if extra_loss is not None:
                loss = loss + extra_loss(model, images, masks, logits)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at step {t}, epoch {epoch}, batch {b} (lr={opt.param_groups[0]['lr']:.3g}, "
                    f"ids={batch.ids[:4]}...)"
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            running.append(float(loss.detach()))
            it += 1
            if batch_log is not None:
                batch_log.append({"step": t, "epoch": epoch, "batch": b, "s_d": plan.s_d, "s_r": plan.s_r,
                                  "n_replay": batch.n_replay, "padded": batch.padded, "ids": batch.ids})
        epoch_losses.append(float(np.mean(running)))
        logger.debug("step %d epoch %d loss %.4f", t, epoch, epoch_losses[-1])
    model.eval()
    return model, epoch_losses


def evaluate_step(model: torch.nn.Module, test_set: Dataset, groups: dict[str, list[int]],
                  n_classes: int | None = None, step: int | None = None, batch_size: int = 32) -> GroupedReport:
    """Grouped mIoU report of ``model`` on an already label-restricted test set."""
    n = n_classes or max(model.n_classes, max((c for ids in groups.values() for c in ids), default=0) + 1)
    cm = ConfusionMatrix(n, test_set.ignore_index)
    if len(test_set):
        preds = predict_masks(model, np.stack([s.image for s in test_set]), batch_size)
        for p, s in zip(preds, test_set):
            cm.update(np.minimum(p, n - 1), s.mask)
    return grouped_report(cm, groups, test_set.class_names, step)


def _param_snapshot(model: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _write_step(out_dir: Path | None, record: RunRecord, result: StepResult, model, seen) -> None:
    if out_dir is None:
        return
    d = out_dir / f"step_{result.step}"
    d.mkdir(parents=True, exist_ok=True)
    result.checkpoint = str(save_checkpoint(model, result.step, d / "checkpoint.pt", seen, record.config_hash))
    (d / "report.json").write_text(result.report.to_json())
    (d / "report.csv").write_text(reports_to_csv([result.report]))


def _write_record(out_dir: Path | None, record: RunRecord) -> None:
    if out_dir is None:
        return
    (out_dir / "record.json").write_text(json.dumps(record.summary(), indent=2))
    with open(out_dir / "batches.log", "w") as fh:
        for row in record.batch_log:
            fh.write(json.dumps(row) + "\n")


def run_continual(
    train_data: Dataset | Sequence[Dataset],
    test_data: Dataset | Sequence[Dataset],
    protocol: Protocol,
    config: TrainConfig,
    mode: str = "endocss",
    out_dir: str | Path | None = None,
    id_maps: Sequence[dict[int, int]] | None = None,
    keep_step_states: bool = False,
) -> RunRecord:
    """Run the full class-incremental sequence and evaluate after every step.

    Evaluation after step ``t`` uses every test image with labels restricted
    to the classes seen so far. With ``out_dir`` the run directory receives
    ``config.json``, ``step_k/{checkpoint.pt,report.json,report.csv}``,
    ``batches.log`` and ``record.json`` (also written when a step fails).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    out = Path(out_dir) if out_dir is not None else None
    record = RunRecord(mode, protocol.name, config.to_dict(), config.hash())
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps({"mode": mode, "protocol": protocol.name,
                                                     "steps": [list(g) for g in protocol.steps],
                                                     "class_names": list(protocol.class_names),
                                                     "train": config.to_dict()}, indent=2))
    start = time.perf_counter()
    views = split_dataset(train_data, protocol, config.label_policy, id_maps)
    model = build_model(protocol.n_outputs(0) if mode != "joint" else protocol.n_outputs(protocol.total_steps - 1),
                        {"name": config.model.name, "widths": config.model.widths,
                         "head_init": config.model.head_init}, seed=config.seed)
    try:
        if mode == "joint":
            _run_joint(model, views, test_data, protocol, config, record, out, id_maps)
        else:
            _run_sequence(model, views, test_data, protocol, config, mode, record, out, id_maps, keep_step_states)
    except Exception as exc:
        record.status, record.error = "failed", f"{type(exc).__name__}: {exc}"
        record.wall_clock = time.perf_counter() - start
        _write_record(out, record)
        raise
    record.wall_clock = time.perf_counter() - start
    _write_record(out, record)
    return record


def _run_sequence(model, views, test_data, protocol, config, mode, record, out, id_maps, keep_step_states):
    replay: ReplaySet | None = None
    generator = make_generator(config.replay.generator)
    prev_model = None
    for t, view in enumerate(views):
        if t > 0:
            if mode == "endocss":
                prev = views[t - 1]
                replay = build_replay_set(
                    prev_model, prev.train_set, generator, config.replay.k_per_class, config.replay.n_per_source,
                    config.replay.theta, classes=protocol.new_classes(t - 1), step=t, existing=replay,
                    seed=int(_rng(config.seed, t, _GEN).integers(2**31)), per_class_cap=config.replay.per_class_cap,
                ).cap(config.replay.max_items)
            model = ensure_outputs(model, protocol.n_outputs(t))
        model, losses = train_step(model, view, replay, config, use_sance=(mode == "endocss"),
                                   batch_log=record.batch_log)
        test = cumulative_test_set(test_data, protocol, t, id_maps)
        report = evaluate_step(model, test, protocol.report_groups(t, config.include_background),
                               protocol.n_outputs(t), t, config.eval_batch_size)
        plan = compute_ratio(len(view.train_set), len(replay) if replay else 0, config.batch_size)
        result = StepResult(t, report, len(view.train_set), len(replay) if replay else 0, (plan.s_d, plan.s_r), losses)
        _write_step(out, record, result, model, protocol.seen_classes(t))
        record.steps.append(result)
        if keep_step_states:
            record.step_states.append(_param_snapshot(model))
        logger.info("%s step %d: %s", mode, t, {k: None if v is None else round(v, 4) for k, v in report.groups.items()})
        prev_model = model
        model = copy.deepcopy(model)
    record.model = prev_model


def _run_joint(model, views, test_data, protocol, config, record, out, id_maps):
    last = protocol.total_steps - 1
    samples = [s for v in views for s in v.train_set]
    merged = Dataset(tuple(samples), protocol.class_names, views[0].train_set.ignore_index)
    seen = protocol.seen_classes(last)
    view = StepView(0, merged, seen, seen)
    model, losses = train_step(model, view, None, config, use_sance=False, task_index=0,
                               batch_log=record.batch_log)
    test = cumulative_test_set(test_data, protocol, last, id_maps)
    report = evaluate_step(model, test, protocol.report_groups(last, config.include_background),
                           protocol.n_outputs(last), 0, config.eval_batch_size)
    result = StepResult(0, report, len(merged), 0, (config.batch_size, 0), losses)
    _write_step(out, record, result, model, seen)
    record.steps.append(result)
    record.model = model
