"""Command-line entry point: ``sslab <gen-data|train|eval|attribute|sweep|report>``.

Training settings come from three layers, later ones winning: built-in
defaults, a flat ``key = value`` config file (``--config``), then flags.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .attribution import LrpConfig
from .training import TrainConfig

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# flag name -> TrainConfig field
TRAIN_FLAGS = {
    "objective": ("objective", str),
    "arch": ("arch", str),
    "schedule": ("schedule", str),
    "k": ("k", float),
    "p0": ("p0", float),
    "lambda": ("lam", float),
    "lr": ("lr", float),
    "finetune-lr": ("finetune_lr", float),
    "batch-size": ("batch_size", int),
    "max-updates": ("max_updates", int),
    "warmup-updates": ("warmup_updates", int),
    "fisher-samples": ("fisher_samples", int),
    "seed": ("seed", int),
    "optimizer": ("optimizer", str),
    "clip": ("clip", float),
    "emb-dim": ("emb_dim", int),
    "hidden-dim": ("hidden_dim", int),
    "layers": ("layers", int),
    "heads": ("heads", int),
}


class UsageError(Exception):
    pass


def parse_config_file(path) -> Dict[str, object]:
    """Read ``key = value`` lines ('#' starts a comment) into TrainConfig fields."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} not found")
    by_field = {f: (f, t) for f, t in TRAIN_FLAGS.values()}
    by_field["record_wallclock"] = ("record_wallclock", lambda v: v.lower() in ("1", "true", "yes"))
    out: Dict[str, object] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        spec = TRAIN_FLAGS.get(key) or TRAIN_FLAGS.get(key.replace("_", "-")) or by_field.get(key)
        if spec is None:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        name, conv = spec
        try:
            out[name] = None if value.lower() == "none" else conv(value)
        except ValueError:
            raise UsageError(f"{path}:{lineno}: bad value {value!r} for {key}") from None
    return out


def build_train_config(args, **overrides) -> TrainConfig:
    values: Dict[str, object] = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    for flag, (name, _) in TRAIN_FLAGS.items():
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if getattr(args, "wallclock", False):
        values["record_wallclock"] = True
    values.update(overrides)
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None


def _floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _positions(text: str) -> List[int]:
    out: List[int] = []
    try:
        for part in text.split(","):
            if "-" in part:
                lo, hi = part.split("-")
                out.extend(range(int(lo), int(hi) + 1))
            elif part.strip():
                out.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad position list {text!r}") from None
    return out


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training settings (override --config)")
    for flag, (name, conv) in TRAIN_FLAGS.items():
        g.add_argument(f"--{flag}", dest=name, type=conv, default=None)
    g.add_argument("--config", help="flat key = value file with training settings")
    g.add_argument("--wallclock", action="store_true",
                   help="add a wallclock_ms column to history.csv (makes it run-dependent)")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sslab", description="Scheduled sampling and EWC experiments on synthetic translation tasks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--task", default="lexswap", choices=("copy", "reverse", "lexswap"))
    p.add_argument("--n", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--length-min", type=int, default=5)
    p.add_argument("--length-max", type=int, default=15)
    p.add_argument("--vocab-size", type=int, default=40)
    p.add_argument("--split-sizes", type=_ints, default=None, help="train,valid,test (default 90/5/5 percent)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--data", required=True)
    p.add_argument("--runs", default="runs")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="BLEU with model prefixes (MP) and/or teacher forcing (TF)")
    p.add_argument("--run", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--mode", default="both", choices=("mp", "tf", "both"))
    p.add_argument("--bin-width", type=int, default=20)

    p = sub.add_parser("attribute", help="LRP source-contribution curve")
    p.add_argument("--run", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--split", default="test", choices=("train", "valid", "test"))
    p.add_argument("--positions", type=_positions, default=None, help="e.g. 1-15 or 1,5,10")
    p.add_argument("--max-pairs", type=int, default=100)
    p.add_argument("--prefix", default="gold", choices=("gold", "model"))
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--eps", type=float, default=1e-9)

    p = sub.add_parser("sweep", help="schedule x k x lambda grid")
    p.add_argument("--data", required=True)
    p.add_argument("--runs", default="runs")
    p.add_argument("--schedules", default="inverse-sigmoid")
    p.add_argument("--k-grid", type=_floats, required=True)
    p.add_argument("--lambda-grid", type=_floats, required=True)
    p.add_argument("--seeds", type=_ints, default=[0])
    p.add_argument("--split", default="test", choices=("valid", "test"))
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default=None, help="sweep CSV (default <runs>/sweep.csv)")
    _add_train_flags(p)

    p = sub.add_parser("report", help="aggregate finished runs into tables")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=("valid", "test"))
    return parser


def _print_rows(columns, rows) -> None:
    from .runner import fmt
    print(",".join(columns))
    for r in rows:
        print(",".join(fmt(v) for v in r))


def _dispatch(args) -> int:
    from . import runner

    if args.command == "gen-data":
        if args.n < 1:
            raise UsageError("--n must be positive")
        sizes = tuple(args.split_sizes) if args.split_sizes else None
        if sizes is not None and (len(sizes) != 3 or sum(sizes) != args.n):
            raise UsageError("--split-sizes needs three counts summing to --n")
        try:
            out = runner.generate_data(args.out, args.task, args.n, (args.length_min, args.length_max),
                                       args.vocab_size, args.seed, sizes)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        print(out)
        return EXIT_OK

    if args.command == "train":
        config = build_train_config(args)
        corpus = _load(runner, args.data, "train")
        print(runner.ensure_run(args.runs, config, corpus, args.data))
        return EXIT_OK

    if args.command == "eval":
        _require_run(runner, args.run)
        modes = ("MP", "TF") if args.mode == "both" else (args.mode.upper(),)
        if args.bin_width < 1:
            raise UsageError("--bin-width must be at least 1")
        rows = runner.evaluate_run(args.run, args.data, args.split, modes, args.bin_width)
        _print_rows(runner.EVAL_COLUMNS, rows)
        return EXIT_OK

    if args.command == "attribute":
        _require_run(runner, args.run)
        try:
            cfg = LrpConfig(args.alpha, args.beta, args.eps)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        rows = runner.attribute_run(args.run, args.data, args.split, args.positions, args.max_pairs, args.prefix, cfg)
        _print_rows(runner.CURVE_COLUMNS, rows)
        return EXIT_OK

    if args.command == "sweep":
        base = build_train_config(args, objective="ss")
        _load(runner, args.data, "train")
        schedules = [s for s in args.schedules.split(",") if s]
        for s in schedules:
            try:
                TrainConfig(objective="ss", schedule=s, k=args.k_grid[0] if args.k_grid else 1.0)
            except ValueError as exc:
                raise UsageError(str(exc)) from None
        if not schedules or not args.k_grid or not args.lambda_grid or not args.seeds:
            raise UsageError("sweep grid must be nonempty")
        out = Path(args.out) if args.out else Path(args.runs) / "sweep.csv"
        Path(args.runs).mkdir(parents=True, exist_ok=True)
        rows = runner.sweep(args.data, args.runs, base, schedules, args.k_grid, args.lambda_grid, args.seeds,
                            args.split, out, args.jobs)
        print(out)
        failed = [r for r in rows if r[-1] != "ok"]
        for r in failed:
            print(f"sslab: cell {r[:4]} {r[-1]}", file=sys.stderr)
        return EXIT_OK

    if args.command == "report":
        from .report import ReportError, build_report
        try:
            files = build_report(args.runs, args.out, args.split)
        except ReportError as exc:
            raise UsageError(str(exc)) from None
        print(files["text"].read_text(encoding="utf-8"), end="")
        return EXIT_OK
    raise UsageError(f"unknown command {args.command!r}")


def _load(runner, data_dir, split):
    try:
        return runner.load_split(data_dir, split)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None


def _require_run(runner, run_dir):
    if not (Path(run_dir) / runner.MANIFEST).exists():
        raise UsageError(f"{run_dir} is not a run directory (no {runner.MANIFEST})")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except UsageError as exc:
        print(f"sslab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure: report and signal with exit code 1
        print(f"sslab {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
