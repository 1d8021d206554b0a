"""Command-line entry point: ``endocss <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 invalid input (config, protocol,
missing files).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence


from . import __version__
from .config import ConfigError, read_config_file, resolve_config, toy_config, deep_merge
from .corruption import REQUIRED, SEVERITIES, plot_curve, robustness_eval
from .datamodel import Dataset, DatasetError, load_dataset, save_dataset, synth_shapes_dataset, train_test_split
from .metrics import GroupedReport, reports_to_csv
from .protocol import ProtocolError, cross_dataset_protocol, parse_protocol, remap_labels, truncate
from .replay import build_replay_set, make_generator, save_replay_set
from .segmodel import CheckpointError, load_checkpoint
from .trainer import evaluate_step, run_continual

logger = logging.getLogger("endocss")

OUTPUT_ROOT_ENV = "ENDOCSS_OUTPUT_ROOT"


class UsageError(Exception):
    """Bad user input; maps to exit code 2."""


def _output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def write_manifest(out: Path, subcommand: str, config: dict, inputs: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"subcommand": subcommand, "config": config, "inputs": inputs, "output_dir": str(out),
                "version": __version__}
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, default=str))
    return path


def load_split(root: str | Path, seed: int = 0, test_fraction: float = 0.2) -> tuple[Dataset, Dataset]:
    """``root/train`` + ``root/test`` if present, otherwise a seeded 4:1 split of ``root``."""
    root = Path(root)
    if not root.exists():
        raise UsageError(f"data root not found: {root}")
    if (root / "train").is_dir() and (root / "test").is_dir():
        return load_dataset(root / "train"), load_dataset(root / "test")
    return train_test_split(load_dataset(root), test_fraction, seed)


# -- subcommands -------------------------------------------------------------


def cmd_synth_data(args) -> int:
    out = Path(args.out)
    ds = synth_shapes_dataset(args.n_samples, args.n_classes, tuple(args.size), args.seed)
    train, test = train_test_split(ds, args.test_fraction, args.seed)
    write_manifest(out, "synth-data", vars(args), {})
    save_dataset(train, out / "train")
    save_dataset(test, out / "test")
    print(f"wrote {len(train)} train / {len(test)} test samples to {out}")
    return 0


def _train_overrides(args) -> dict[str, Any]:
    o: dict[str, Any] = {
        "batch_size": args.batch_size, "epochs_first": args.epochs_first, "epochs_later": args.epochs_later,
        "lr_first": args.lr_first, "lr_later": args.lr_later, "seed": args.seed, "label_policy": args.label_policy,
    }
    loss = {k: v for k, v in {"sigma": args.sigma, "mu": args.mu, "step_indexing": args.step_indexing}.items()
            if v is not None}
    replay = {k: v for k, v in {"k_per_class": args.k_per_class, "n_per_source": args.n_per_source,
                                "theta": args.theta, "generator": args.generator}.items() if v is not None}
    if loss:
        o["loss"] = loss
    if replay:
        o["replay"] = replay
    return o


def cmd_train(args) -> int:
    file_data = read_config_file(args.config) if args.config else {}
    protocol_spec = args.protocol or file_data.get("protocol")
    mode = args.mode or file_data.get("mode", "endocss")
    data = args.data or file_data.get("data")
    data2 = args.data2 or file_data.get("data2")
    seed = args.seed if args.seed is not None else file_data.get("seed", 0)
    if not data:
        raise UsageError("--data is required")
    args.seed = seed
    overrides = _train_overrides(args)
    if args.toy:
        cfg = toy_config(**deep_merge(file_data.get("train", {}),
                                      {k: v for k, v in overrides.items() if v is not None}))
    else:
        cfg = resolve_config(file_data, overrides)

    out = Path(args.out or file_data.get("out") or _output_root() / f"{(protocol_spec or 'cross')}_{mode}_seed{seed}")
    write_manifest(out, "train", {"protocol": protocol_spec, "mode": mode, "train": cfg.to_dict()},
                   {"data": data, "data2": data2, "class_map": args.class_map})

    if data2:
        train1, test1 = load_split(data, seed)
        train2, test2 = load_split(data2, seed)
        aliases = json.loads(Path(args.class_map).read_text()) if args.class_map else None
        protocol, id_maps = cross_dataset_protocol([train1.class_names[1:], train2.class_names[1:]], aliases)
        train_data, test_data = [train1, train2], [test1, test2]
    else:
        if not protocol_spec:
            raise UsageError("--protocol is required for single-dataset runs")
        train_data, test_data = load_split(data, seed)
        protocol = parse_protocol(protocol_spec, train_data.n_classes - 1, train_data.class_names)
        id_maps = None
    max_steps = args.max_steps or file_data.get("max_steps")
    if max_steps:
        protocol = truncate(protocol, max_steps)
    record = run_continual(train_data, test_data, protocol, cfg, mode, out, id_maps)
    print(render_report(out))
    logger.info("run finished in %.1fs: %s", record.wall_clock, out)
    return 0


def cmd_replay_build(args) -> int:
    out = Path(args.out)
    write_manifest(out, "replay-build", vars(args), {"checkpoint": args.checkpoint, "data": args.data})
    ckpt = load_checkpoint(args.checkpoint)
    train, _ = load_split(args.data, args.seed)
    seen = ckpt.seen_classes or list(range(1, ckpt.model.n_classes))
    prev = train.with_samples(s.with_mask(remap_labels(s.mask, seen, train.ignore_index)) for s in train)
    replay = build_replay_set(ckpt.model, prev, make_generator(args.generator), args.k_per_class, args.n_per_source,
                              args.theta, classes=seen, step=ckpt.step + 1, seed=args.seed)
    save_replay_set(replay, out, train.class_names)
    print(f"wrote {len(replay)} replay items to {out}")
    return 0


def _eval_groups(protocol_spec: str | None, n_fg: int, step: int, seen: list[int]) -> dict[str, list[int]]:
    if protocol_spec:
        return parse_protocol(protocol_spec, n_fg).report_groups(step)
    return {"All": list(seen)}


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    _, test = load_split(args.data, args.seed)
    seen = ckpt.seen_classes or list(range(1, ckpt.model.n_classes))
    test = test.with_samples(s.with_mask(remap_labels(s.mask, seen, test.ignore_index)) for s in test)
    groups = _eval_groups(args.protocol, test.n_classes - 1, ckpt.step, seen)
    report = evaluate_step(ckpt.model, test, groups, max(ckpt.model.n_classes, test.n_classes), ckpt.step)
    if args.out:
        out = Path(args.out)
        write_manifest(out, "eval", vars(args), {"checkpoint": args.checkpoint, "data": args.data})
        (out / "report.json").write_text(report.to_json())
        (out / "report.csv").write_text(report.to_csv())
    print(format_table([report], list(report.groups)))
    return 0


def cmd_robustness(args) -> int:
    out = Path(args.out)
    write_manifest(out, "robustness", vars(args), {"checkpoint": args.checkpoint, "data": args.data})
    ckpt = load_checkpoint(args.checkpoint)
    _, test = load_split(args.data, args.seed)
    seen = ckpt.seen_classes or list(range(1, ckpt.model.n_classes))
    test = test.with_samples(s.with_mask(remap_labels(s.mask, seen, test.ignore_index)) for s in test)
    names = args.corruptions or list(REQUIRED)
    result = robustness_eval(ckpt.model, test, names, args.severities, classes=seen, seed=args.seed)
    (out / "robustness.csv").write_text(result.to_csv())
    (out / "severity_curve.csv").write_text(result.curve_csv())
    if not args.no_plot:
        plot_curve(result, out / "severity_curve.png", label=Path(args.checkpoint).parent.name)
    print(result.curve_csv(), end="")
    return 0


def load_run_reports(run_dir: str | Path) -> list[GroupedReport]:
    run_dir = Path(run_dir)
    steps = sorted(run_dir.glob("step_*/report.json"), key=lambda p: int(p.parent.name.split("_")[1]))
    if not steps:
        raise UsageError(f"no step reports under {run_dir}")
    return [GroupedReport.from_dict(json.loads(p.read_text())) for p in steps]


def format_table(reports: Sequence[GroupedReport], columns: Sequence[str], title: str = "") -> str:
    """Text table with one row per step and one column per class group (mIoU in %)."""
    header = ["step"] + list(columns)
    rows = []
    for r in reports:
        cells = ["" if r.step is None else str(r.step)]
        for c in columns:
            v = r.groups.get(c)
            cells.append("-" if v is None else f"{100 * v:.2f}")
        rows.append(cells)
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(header)]
    line = lambda cells: " | ".join(c.rjust(w) for c, w in zip(cells, widths))  # noqa: E731
    out = [title] if title else []
    out += [line(header), "-+-".join("-" * w for w in widths)] + [line(r) for r in rows]
    return "\n".join(out)


def render_report(run_dir: str | Path, fmt: str = "text") -> str:
    run_dir = Path(run_dir)
    reports = load_run_reports(run_dir)
    if fmt == "csv":
        return reports_to_csv(reports)
    if fmt == "json":
        return json.dumps([r.to_dict() for r in reports], indent=2)
    meta = {}
    if (run_dir / "config.json").is_file():
        meta = json.loads((run_dir / "config.json").read_text())
    title = f"{run_dir.name}: mode={meta.get('mode', '?')} protocol={meta.get('protocol', '?')}"
    return format_table(reports, list(reports[-1].groups), title)


def cmd_report(args) -> int:
    print(render_report(args.run, args.format))
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="endocss", description="Continual segmentation with mini-batch pseudo-replay")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write a synthetic shapes dataset (train/ and test/)")
    s.add_argument("--out", required=True)
    s.add_argument("--n-samples", type=int, default=250)
    s.add_argument("--n-classes", type=int, default=5, help="including background")
    s.add_argument("--size", type=int, nargs=2, default=(64, 64), metavar=("H", "W"))
    s.add_argument("--test-fraction", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="run a continual sequence")
    s.add_argument("--data", help="dataset root (train/ and test/ subdirs, or one split 4:1)")
    s.add_argument("--data2", help="second dataset root; enables cross-dataset mode")
    s.add_argument("--class-map", help="JSON file mapping class-name aliases to canonical names")
    s.add_argument("--protocol", help="a-b schedule, e.g. 4-1")
    s.add_argument("--mode", choices=["endocss", "finetune", "joint"])
    s.add_argument("--config", help="YAML/JSON config file")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--toy", action="store_true", help="start from the CPU-sized preset")
    s.add_argument("--max-steps", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--epochs-first", type=int)
    s.add_argument("--epochs-later", type=int)
    s.add_argument("--lr-first", type=float)
    s.add_argument("--lr-later", type=float)
    s.add_argument("--label-policy", choices=["keep", "background"])
    s.add_argument("--sigma", type=float)
    s.add_argument("--mu", type=float)
    s.add_argument("--step-indexing", choices=["zero", "one"])
    s.add_argument("--k-per-class", type=int)
    s.add_argument("--n-per-source", type=int)
    s.add_argument("--theta", type=float)
    s.add_argument("--generator", choices=["jitter_warp", "identity"])
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("replay-build", help="build a pseudo-replay set from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--k-per-class", type=int, default=10)
    s.add_argument("--n-per-source", type=int, default=1)
    s.add_argument("--theta", type=float)
    s.add_argument("--generator", default="jitter_warp", choices=["jitter_warp", "identity"])
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_replay_build)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a test set")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--protocol")
    s.add_argument("--out")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("robustness", help="corruption x severity mIoU table")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--corruptions", nargs="+")
    s.add_argument("--severities", type=int, nargs="+", default=list(SEVERITIES))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-plot", action="store_true")
    s.set_defaults(func=cmd_robustness)

    s = sub.add_parser("report", help="render the tables of a finished run")
    s.add_argument("--run", required=True)
    s.add_argument("--format", choices=["text", "csv", "json"], default="text")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ProtocolError, DatasetError, CheckpointError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure; partial records stay on disk
        logger.exception("command failed")
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
