"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .data import (
    DEFAULT_CYCLE_ASSIGNMENT,
    DatasetFormatError,
    SplitError,
    load_dataset,
    read_manifest,
    save_dataset,
    split_by_cycle,
    split_random,
    write_json,
)
from .lprm import LprmInterpolator, LprmLayout
from .model import ModelConfig, build_model, load_model, predict, save_model
from .synth import DEFAULT_CAMPAIGN, generate_campaign, load_campaign_config
from .train import TrainConfig, emit_report, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="critforge", description=__doc__, formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    g = sub.add_parser("generate", help="generate a synthetic multi-cycle dataset", formatter_class=fmt)
    g.add_argument("--config", type=Path, default=None,
                   help="generator config (JSON); default is the built-in four-cycle campaign")
    g.add_argument("--seed", type=_u64, default=0, help="generator seed")
    g.add_argument("--out", type=Path, required=True, help="output dataset directory")

    i = sub.add_parser("interp", help="interpolate LPRM readings to a dense volume", formatter_class=fmt)
    i.add_argument("--readings", type=Path, required=True, help="CSV of 43 rows x 4 axial readings")
    i.add_argument("--layout", type=Path, required=True,
                   help="layout JSON, or a dataset manifest/directory carrying one")
    i.add_argument("--out", type=Path, required=True, help="output directory")

    t = sub.add_parser("train", help="train the criticality model", formatter_class=fmt)
    t.add_argument("--data", type=Path, required=True, help="dataset directory")
    t.add_argument("--split", choices=("random", "cycle"), required=True,
                   help="random 70/15/15 or cycle-based (20+23 / 21 / 22)")
    t.add_argument("--seed", type=_u64, default=0, help="seed for split, init, shuffling and dropout")
    t.add_argument("--out", type=Path, required=True, help="run directory")
    t.add_argument("--config", type=Path, default=None,
                   help='JSON with optional "model", "train", "ratios", "assignment" sections')

    e = sub.add_parser("eval", help="evaluate a trained model on one partition", formatter_class=fmt)
    e.add_argument("--model", type=Path, required=True, help="model checkpoint directory")
    e.add_argument("--data", type=Path, required=True, help="dataset directory")
    e.add_argument("--partition", choices=("train", "val", "test"), required=True,
                   help="partition of the split recorded in the checkpoint")
    e.add_argument("--out", type=Path, required=True, help="report directory")

    r = sub.add_parser("predict", help="print predicted k for one record", formatter_class=fmt)
    r.add_argument("--model", type=Path, required=True, help="model checkpoint directory")
    r.add_argument("--record", type=Path, required=True, help="dataset directory holding the record")
    r.add_argument("--index", type=int, required=True, help="record index within the dataset")
    return p


# -- subcommands ---------------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.config is not None:
        specs, layout_seed = load_campaign_config(args.config)
    else:
        specs, layout_seed = list(DEFAULT_CAMPAIGN), 0
    ds = generate_campaign(specs, seed=args.seed, layout_seed=layout_seed)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} records to {args.out}")
    return EXIT_OK


def _load_layout(path: Path) -> LprmLayout:
    if path.is_dir():
        return LprmLayout.from_dict(read_manifest(path)["layout"])
    d = json.loads(path.read_text())
    return LprmLayout.from_dict(d.get("layout", d))


def _read_readings(path: Path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f) if r]
    try:
        float(rows[0][0])
    except (ValueError, IndexError):
        rows = rows[1:]
    try:
        return np.array([[float(v) for v in r] for r in rows])
    except ValueError as exc:
        raise DatasetFormatError(f"non-numeric reading in {path}: {exc}") from exc


def cmd_interp(args) -> int:
    layout = _load_layout(args.layout)
    readings = _read_readings(args.readings)
    vol = LprmInterpolator(layout).volume(readings)
    args.out.mkdir(parents=True, exist_ok=True)
    vol.astype("<f8").tofile(args.out / "volume.f64")
    write_json(args.out / "manifest.json", {
        "format_version": 1,
        "kind": "flux-volume",
        "blobs": {"volume": {"file": "volume.f64", "dtype": "<f8", "shape": list(vol.shape)}},
        "layout": layout.to_dict(),
    })
    _plot_volume(vol, args.out / "volume.svg")
    print(f"wrote {vol.shape} volume to {args.out}")
    return EXIT_OK


def _plot_volume(vol: np.ndarray, path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "critforge"
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3.5))
    a.imshow(vol[vol.shape[0] // 2], origin="lower")
    a.set_title("radial, mid-plane")
    b.imshow(vol[:, vol.shape[1] // 2, :], origin="lower", aspect="auto")
    b.set_title("axial, mid-row")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def _split_for(ds, kind: str, seed: int, extra: dict):
    if kind == "random":
        return split_random(len(ds), tuple(extra.get("ratios", (0.70, 0.15, 0.15))), seed)
    assignment = extra.get("assignment") or DEFAULT_CYCLE_ASSIGNMENT
    return split_by_cycle(ds, {int(k): v for k, v in assignment.items()})


def cmd_train(args) -> int:
    extra = json.loads(args.config.read_text()) if args.config else {}
    try:
        mcfg = ModelConfig.from_dict(extra.get("model", {}))
        tcfg = TrainConfig.from_dict({"seed": args.seed, **extra.get("train", {})})
    except TypeError as exc:
        raise UsageError(f"bad config: {exc}") from exc
    ds = load_dataset(args.data)
    split = _split_for(ds, args.split, args.seed, extra)
    model = build_model(mcfg, init_seed=args.seed)
    res = train(model, ds, split, tcfg)
    res.model.meta["split"]["seed"] = int(args.seed)
    save_model(res.model, args.out / "model")
    emit_report(res.reports["test"], args.out,
                companions=[res.reports["train"], res.reports["val"]])
    for p in ("train", "val", "test"):
        r = res.reports[p]
        print(f"{p:5s} mse={r.mse:.4e} r2={r.r2:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.model)
    ds = load_dataset(args.data)
    info = dict(model.meta.get("split", {}))
    kind = info.pop("kind", None)
    if kind not in ("random", "cycle"):
        raise DatasetFormatError("checkpoint records no split; cannot select a partition")
    split = _split_for(ds, kind, int(info.get("seed", 0)), info)
    report = evaluate(model, ds, split[args.partition], args.partition)
    emit_report(report, args.out)
    print(f"{args.partition} mse={report.mse:.4e} r2={report.r2:.4f}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_model(args.model)
    ds = load_dataset(args.record)
    if not 0 <= args.index < len(ds):
        raise UsageError(f"--index {args.index} outside 0..{len(ds) - 1}")
    i = args.index
    k = predict(model, ds.f3d[i:i + 1], ds.f2d[i:i + 1], ds.f0d[i:i + 1])[0]
    print(f"{k:.6f}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "interp": cmd_interp,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
}


def _thread_cap():
    raw = os.environ.get("CRIT_FORGE_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"CRIT_FORGE_THREADS must be an integer, got {raw!r}")
    return threadpool_limits(n) if n > 0 else nullcontext()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_cap():
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"critforge: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"critforge: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetFormatError, SplitError, FileNotFoundError, ValueError, KeyError,
            json.JSONDecodeError) as exc:
        print(f"critforge: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
