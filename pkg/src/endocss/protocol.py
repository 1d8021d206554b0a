"""Class-incremental task sequences and per-step label views."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .datamodel import IGNORE_INDEX, Dataset, DatasetError

logger = logging.getLogger(__name__)

SINGLE = "single-dataset-split"
CROSS = "cross-dataset"

# Class lists of the reference benchmarks (background excluded).
EDD2020_CLASSES = ("BE", "cancer", "HGD", "polyp", "suspicious")
ENDOVIS17_CLASSES = (
    "Bipolar Forceps",
    "Prograsp Forceps",
    "Large Needle Driver",
    "Vessel Sealer",
    "Grasping Retractor",
    "Monopolar Curved Scissors",
    "Ultrasound Probe",
)
ENDOVIS18_CLASSES = (
    "Bipolar Forceps",
    "Prograsp Forceps",
    "Large Needle Driver",
    "Monopolar Curved Scissors",
    "Ultrasound Probe",
    "Suction Instrument",
    "Clip Applier",
)

KEEP_SEEN = "keep"  # old-class pixels keep their labels in later steps
CURRENT_ONLY = "background"  # only current-step classes stay labeled


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class Protocol:
    steps: tuple[tuple[int, ...], ...]
    class_names: tuple[str, ...]
    mode: str = SINGLE
    name: str = ""

    def __post_init__(self):
        if not self.steps:
            raise ProtocolError("a protocol needs at least one step")
        flat = [c for g in self.steps for c in g]
        if any(c <= 0 or c >= len(self.class_names) for c in flat):
            raise ProtocolError(f"class ids must lie in 1..{len(self.class_names) - 1}")
        if self.mode == SINGLE and len(set(flat)) != len(flat):
            raise ProtocolError("step groups must be disjoint in single-dataset mode")

    @property
    def total_steps(self) -> int:
        return len(self.steps)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def seen_classes(self, t: int) -> tuple[int, ...]:
        """Foreground classes visible up to and including step ``t``."""
        return tuple(sorted({c for g in self.steps[: t + 1] for c in g}))

    def old_classes(self, t: int) -> tuple[int, ...]:
        return self.seen_classes(t - 1) if t > 0 else ()

    def new_classes(self, t: int) -> tuple[int, ...]:
        old = set(self.old_classes(t))
        return tuple(c for c in sorted(self.steps[t]) if c not in old)

    def n_outputs(self, t: int) -> int:
        """Head size at step ``t``: background plus all seen classes."""
        return max(self.seen_classes(t)) + 1

    def report_groups(self, t: int | None = None, include_background: bool = False) -> dict[str, list[int]]:
        """Ordered report groups for step ``t`` (last step by default).

        Single-dataset groups are named by class-id range the way results
        tables usually are ("0-4", "5", "All"); the first group's name starts
        at 0 even though background is only counted when requested.
        Cross-dataset groups are RC (shared), OC (old only), NC (new only).
        """
        t = self.total_steps - 1 if t is None else t
        groups: dict[str, list[int]] = {}
        seen = list(self.seen_classes(t))
        if self.mode == SINGLE:
            for i, g in enumerate(self.steps[: t + 1]):
                ids = sorted(g)
                lo = 0 if i == 0 else ids[0]
                name = f"{lo}-{ids[-1]}" if lo != ids[-1] else str(lo)
                groups[name] = ([0] if include_background and i == 0 else []) + ids
        else:
            first = set(self.steps[0])
            later = {c for g in self.steps[1:] for c in g}
            rc = sorted(first & later)
            oc = sorted(first - later)
            nc = sorted(later - first)
            for name, ids in (("RC", rc), ("OC", oc), ("NC", nc)):
                ids = [c for c in ids if c in seen]
                if ids:
                    groups[name] = ids
        groups["All"] = ([0] if include_background else []) + seen
        return groups


_SPEC = re.compile(r"^\s*(\d+)\s*-\s*(\d+)\s*$")


def parse_protocol(spec: str, n_foreground_classes: int, class_names: Sequence[str] | None = None) -> Protocol:
    """Parse an ``a-b`` schedule: ``a`` classes first, then ``b`` per step.

    >>> parse_protocol("3-1", 5).steps
    ((1, 2, 3), (4,), (5,))
    """
    m = _SPEC.match(spec)
    if not m:
        raise ProtocolError(f"protocol {spec!r} does not match the 'a-b' form")
    first, per_step = int(m.group(1)), int(m.group(2))
    n = n_foreground_classes
    if first < 1 or first > n:
        raise ProtocolError(f"protocol {spec!r}: initial count {first} not in 1..{n}")
    rest = n - first
    if rest and (per_step < 1 or rest % per_step):
        raise ProtocolError(f"protocol {spec!r}: {rest} remaining classes cannot be split into steps of {per_step}")
    steps = [tuple(range(1, first + 1))]
    for lo in range(first + 1, n + 1, per_step or 1):
        steps.append(tuple(range(lo, lo + per_step)))
    if class_names is None:
        class_names = ["background"] + [f"class_{i}" for i in range(1, n + 1)]
    if len(class_names) != n + 1:
        raise ProtocolError(f"expected {n + 1} class names (with background), got {len(class_names)}")
    return Protocol(tuple(steps), tuple(class_names), SINGLE, spec.strip())


def truncate(protocol: Protocol, n_steps: int) -> Protocol:
    """Keep only the first ``n_steps`` steps."""
    if not 1 <= n_steps <= protocol.total_steps:
        raise ProtocolError(f"cannot keep {n_steps} of {protocol.total_steps} steps")
    return Protocol(protocol.steps[:n_steps], protocol.class_names, protocol.mode, protocol.name)


def cross_dataset_protocol(
    class_lists: Sequence[Sequence[str]],
    aliases: dict[str, str] | None = None,
    name: str = "cross",
) -> tuple[Protocol, list[dict[int, int]]]:
    """Unify per-dataset class lists by name, one dataset per step.

    ``class_lists`` exclude background. Returns the protocol and, for each
    dataset, a map from its local class id (1-based) to the unified id.
    """
    aliases = aliases or {}
    unified = ["background"]
    id_maps = []
    steps = []
    for names in class_lists:
        local = {}
        for i, raw in enumerate(names, start=1):
            canon = aliases.get(raw, raw)
            if canon not in unified:
                unified.append(canon)
            local[i] = unified.index(canon)
        id_maps.append(local)
        steps.append(tuple(sorted(local.values())))
    proto = Protocol(tuple(steps), tuple(unified), CROSS, name)
    for t in range(1, proto.total_steps):
        if not proto.new_classes(t):
            logger.warning("step %d introduces no new class", t)
    return proto, id_maps


@dataclass(frozen=True)
class StepView:
    step_index: int
    train_set: Dataset
    seen_classes: tuple[int, ...]
    current_classes: tuple[int, ...]
    label_policy: str = KEEP_SEEN

    @property
    def visible_classes(self) -> tuple[int, ...]:
        return self.seen_classes if self.label_policy == KEEP_SEEN else self.current_classes


def remap_labels(mask: np.ndarray, step: StepView | Iterable[int], ignore_index: int = IGNORE_INDEX) -> np.ndarray:
    """Send pixels of classes that are not visible at ``step`` to background."""
    visible = step.visible_classes if isinstance(step, StepView) else tuple(step)
    keep = np.isin(mask, np.asarray(list(visible) + [0, ignore_index], dtype=mask.dtype))
    return np.where(keep, mask, 0).astype(mask.dtype, copy=False)


def _apply_id_map(mask: np.ndarray, id_map: dict[int, int], ignore_index: int) -> np.ndarray:
    lut = np.zeros(max(max(id_map, default=0), int(mask.max(initial=0))) + 1, dtype=np.int64)
    for src, dst in id_map.items():
        lut[src] = dst
    out = np.where(mask == ignore_index, 0, mask)
    out = lut[out]
    out[mask == ignore_index] = ignore_index
    return out


def _view(t: int, protocol: Protocol, samples, dataset: Dataset, label_policy: str) -> StepView:
    seen = protocol.seen_classes(t)
    current = tuple(sorted(protocol.steps[t]))
    proto_view = StepView(t, dataset, seen, current, label_policy)
    remapped = [
        s.with_mask(remap_labels(s.mask, proto_view, dataset.ignore_index), step=t) for s in samples
    ]
    train = Dataset(tuple(remapped), protocol.class_names, dataset.ignore_index)
    return StepView(t, train, seen, current, label_policy)


def assign_step(mask: np.ndarray, protocol: Protocol, ignore_index: int = IGNORE_INDEX) -> int | None:
    """Step of the highest-index foreground class present, or None."""
    step_of = {c: i for i, g in enumerate(protocol.steps) for c in g}
    present = [int(v) for v in np.unique(mask) if v != 0 and v != ignore_index and int(v) in step_of]
    if not present:
        return None
    return step_of[max(present)]


def split_dataset(
    dataset: Dataset | Sequence[Dataset],
    protocol: Protocol,
    label_policy: str = KEEP_SEEN,
    id_maps: Sequence[dict[int, int]] | None = None,
) -> list[StepView]:
    """Build one :class:`StepView` per protocol step.

    Single-dataset mode assigns every sample to the step of its highest-index
    present class. Cross-dataset mode takes one dataset per step plus the
    local-to-unified id maps from :func:`cross_dataset_protocol`.
    """
    if label_policy not in (KEEP_SEEN, CURRENT_ONLY):
        raise ProtocolError(f"unknown label policy {label_policy!r}")
    if protocol.mode == CROSS:
        if isinstance(dataset, Dataset):
            raise ProtocolError("cross-dataset mode needs one dataset per step")
        if len(dataset) != protocol.total_steps or id_maps is None or len(id_maps) != len(dataset):
            raise ProtocolError("cross-dataset mode needs one dataset and one id map per step")
        views = []
        for t, (ds, id_map) in enumerate(zip(dataset, id_maps)):
            unified = [s.with_mask(_apply_id_map(s.mask, id_map, ds.ignore_index)) for s in ds]
            base = Dataset(tuple(unified), protocol.class_names, ds.ignore_index)
            views.append(_view(t, protocol, base.samples, base, label_policy))
        return views

    if not isinstance(dataset, Dataset):
        raise ProtocolError("single-dataset mode takes exactly one dataset")
    if max(c for g in protocol.steps for c in g) >= dataset.n_classes:
        raise ProtocolError("protocol references classes the dataset does not declare")
    buckets: list[list] = [[] for _ in protocol.steps]
    for s in dataset:
        t = assign_step(s.mask, protocol, dataset.ignore_index)
        if t is None:
            logger.warning("sample %s has no foreground class; assigned to step 0", s.id)
            t = 0
        buckets[t].append(s)
    return [_view(t, protocol, bucket, dataset, label_policy) for t, bucket in enumerate(buckets)]


def cumulative_test_set(test: Dataset | Sequence[Dataset], protocol: Protocol, t: int,
                        id_maps: Sequence[dict[int, int]] | None = None) -> Dataset:
    """Test samples with labels restricted to the classes seen up to step ``t``.

    Cross-dataset runs evaluate on the test sets of every dataset seen so far.
    """
    seen = protocol.seen_classes(t)
    if protocol.mode == CROSS:
        if id_maps is None:
            raise ProtocolError("cross-dataset evaluation needs id maps")
        parts = []
        for ds, id_map in list(zip(test, id_maps))[: t + 1]:
            parts += [s.with_mask(_apply_id_map(s.mask, id_map, ds.ignore_index)) for s in ds]
        ignore = test[0].ignore_index
    else:
        parts = list(test)
        ignore = test.ignore_index
    samples = [s.with_mask(remap_labels(s.mask, seen, ignore)) for s in parts]
    try:
        return Dataset(tuple(samples), protocol.class_names, ignore)
    except DatasetError as exc:
        raise ProtocolError(f"test sets overlap: {exc}") from exc
