"""Run directories, manifests and the experiment drivers behind the CLI.

Every training run lives in ``<runs root>/<objective>-<hash>`` where the
hash covers the effective training config and the training corpus
content, so two different configs can never overwrite each other and a
finished run is simply reused. A run directory holds

* ``checkpoint.sslb``  -- parameters, optimizer state, EWC anchor
* ``history.csv``      -- update, p, loss, ewc_penalty (+ wallclock_ms on request)
* ``manifest.json``    -- config echo, seed, corpus hash, timestamps, artifacts

Runs that continue after a teacher-forced warmup resume from a shared
warmup run (objective ``mle`` stopped at the warmup), which is bitwise
equivalent to training from scratch because all randomness is keyed by
(seed, stream, counter).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .attribution import LrpConfig, contribution_curve
from .checkpoint import load_checkpoint, save_checkpoint
from .datagen import Corpus, Vocab, gen_task, read_corpus, split_corpus, write_corpus
from .evaluation import bleu, decode_corpus, length_binned_bleu, sentence_bleu
from .training import TrainConfig, TrainingDiverged, encode_corpus, load_model, train

logger = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.sslb"
HISTORY = "history.csv"
MANIFEST = "manifest.json"
SPLITS = ("train", "valid", "test")
EVAL_COLUMNS = ("model_tag", "objective", "schedule", "k", "lambda", "seed", "mode", "bleu", "n_sentences")
CURVE_COLUMNS = ("position", "mean_source_contribution", "n_sentences", "model_tag")
BIN_COLUMNS = ("bin_low", "bin_high", "bleu", "n_pairs")
SWEEP_COLUMNS = ("schedule", "k", "lambda", "seed", "mp_bleu", "tf_bleu", "status")


def fmt(x) -> str:
    """Stable text form for CSV cells (shortest round-trip repr for floats)."""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_csv(path, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    path = Path(path)
    path.write_text(buf.getvalue(), encoding="utf-8", newline="\n")
    return path


def read_csv(path) -> List[Dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


# -- data ---------------------------------------------------------------------

def generate_data(out_dir, task: str = "lexswap", n: int = 5000, length_range=(5, 15), vocab_size: int = 40,
                  seed: int = 0, sizes: Optional[Tuple[int, int, int]] = None) -> Path:
    """Write train/valid/test corpus files plus a manifest into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = gen_task(task, n, tuple(length_range), vocab_size, seed)
    if sizes is None:
        n_eval = n // 20
        sizes = (n - 2 * n_eval, n_eval, n_eval)
    parts = split_corpus(corpus, tuple(sizes), seed)
    files = {}
    for name in SPLITS:
        path = out / f"{name}.txt"
        write_corpus(path, parts[name])
        files[name] = {"path": path.name, "pairs": len(parts[name]), "sha256": parts[name].content_hash()}
    manifest = {"generator": corpus.manifest, "split_sizes": list(sizes), "files": files}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def load_split(data_dir, split: str) -> Corpus:
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    path = Path(data_dir) / f"{split}.txt"
    if not path.exists():
        raise FileNotFoundError(f"corpus file {path} not found")
    return read_corpus(path)


# -- training runs ----------------------------------------------------------------

def effective_config(config: TrainConfig) -> dict:
    """Config fields that determine the run's outputs (hash input and manifest echo)."""
    d = config.to_dict()
    d["warmup_updates"] = config.warmup
    if config.objective == "mle":
        # schedule settings never influence a teacher-forced run
        for name in ("schedule", "k", "p0"):
            d[name] = None
    if config.objective != "ss-ewc":
        d["lam"] = 0.0
        d["fisher_samples"] = None
    return d


def run_id(config: TrainConfig, corpus_hash: str) -> str:
    payload = json.dumps({"config": effective_config(config), "corpus": corpus_hash}, sort_keys=True)
    return f"{config.objective}-{hashlib.sha256(payload.encode()).hexdigest()[:12]}"


def warmup_config(config: TrainConfig) -> TrainConfig:
    """The teacher-forced run whose end state ``config`` continues from."""
    W = config.warmup
    return replace(config, objective="mle", max_updates=W, warmup_updates=W, finetune_lr=None,
                   schedule=TrainConfig.schedule, k=TrainConfig.k, p0=TrainConfig.p0, lam=0.0,
                   fisher_samples=TrainConfig.fisher_samples)


def model_tag(cfg: dict) -> str:
    parts = [cfg["arch"], cfg["objective"]]
    if cfg["objective"] != "mle":
        parts += [cfg["schedule"], f"k={fmt(cfg['k'])}"]
    if cfg["objective"] == "ss-ewc":
        parts.append(f"lam={fmt(cfg['lam'])}")
    parts.append(f"seed={cfg['seed']}")
    return "/".join(parts)


def read_manifest(run_dir) -> dict:
    path = Path(run_dir) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"{run_dir} has no {MANIFEST}")
    return json.loads(path.read_text(encoding="utf-8"))


def write_manifest(run_dir, manifest: dict) -> None:
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    (Path(run_dir) / MANIFEST).write_text(text, encoding="utf-8")


def add_artifact(run_dir, key: str, filename: str) -> None:
    m = read_manifest(run_dir)
    m.setdefault("artifacts", {})[key] = filename
    write_manifest(run_dir, m)


def _history_rows(history, wallclock: bool):
    cols = ["update", "p", "loss", "ewc_penalty"] + (["wallclock_ms"] if wallclock else [])
    return cols, [[row.get(c, "") for c in cols] for row in history]


def ensure_run(runs_root, config: TrainConfig, corpus: Corpus, data_dir=None,
               share_warmup: bool = True, role: str = "final") -> Path:
    """Train ``config`` on ``corpus`` unless an identical finished run exists."""
    corpus_hash = corpus.content_hash()
    run_dir = Path(runs_root) / run_id(config, corpus_hash)
    if (run_dir / MANIFEST).exists() and read_manifest(run_dir).get("status") == "complete":
        return run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    started = now()
    resume, prior, resumed_from = None, [], None
    W = config.warmup
    if share_warmup and 0 < W < config.max_updates:
        wdir = ensure_run(runs_root, warmup_config(config), corpus, data_dir, share_warmup=False, role="warmup")
        resume = load_checkpoint(wdir / CHECKPOINT)
        prior = [{k: _parse_number(v) for k, v in row.items()} for row in read_csv(wdir / HISTORY)]
        resumed_from = wdir.name
    status = "complete"
    try:
        result = train(config, corpus, resume=resume)
        ckpt, history = result.checkpoint, prior + result.history
    except TrainingDiverged as exc:
        ckpt, history, status = exc.checkpoint, prior, f"diverged at update {exc.update}"
    ckpt.meta["train_config"] = config.to_dict()
    save_checkpoint(run_dir / CHECKPOINT, ckpt)
    cols, rows = _history_rows(history, config.record_wallclock)
    write_csv(run_dir / HISTORY, cols, rows)
    eff = effective_config(config)
    manifest = {
        "run_id": run_dir.name,
        "role": role,
        "status": status,
        "model_tag": model_tag(eff),
        "config": eff,
        "seed": config.seed,
        "corpus_hash": corpus_hash,
        "data_dir": None if data_dir is None else str(Path(data_dir).resolve()),
        "resumed_from": resumed_from,
        "started": started,
        "finished": now(),
        "artifacts": {"checkpoint": CHECKPOINT, "history": HISTORY},
    }
    write_manifest(run_dir, manifest)
    if status != "complete":
        raise TrainingDiverged(len(history), ckpt, status)
    return run_dir


def _parse_number(v: str):
    if v == "":
        return v
    try:
        return int(v)
    except ValueError:
        return float(v)


# -- evaluation and attribution ----------------------------------------------------

def load_run_model(run_dir):
    ckpt = load_checkpoint(Path(run_dir) / CHECKPOINT)
    model = load_model(ckpt)
    return model, Vocab.from_list(ckpt.meta["src_vocab"]), Vocab.from_list(ckpt.meta["tgt_vocab"])


def _data_dir(run_dir, data_dir):
    data_dir = data_dir or read_manifest(run_dir).get("data_dir")
    if data_dir is None:
        raise ValueError(f"run {run_dir} does not record its data directory; pass one explicitly")
    return data_dir


def evaluate_run(run_dir, data_dir=None, split: str = "test", modes=("MP", "TF"), bin_width: int = 20
                 ) -> List[list]:
    """BLEU rows for each mode; also writes per-sentence scores and length bins."""
    run_dir = Path(run_dir)
    manifest = read_manifest(run_dir)
    corpus = load_split(_data_dir(run_dir, data_dir), split)
    model, sv, tv = load_run_model(run_dir)
    src, ref = encode_corpus(corpus, sv, tv)
    cfg = manifest["config"]
    rows = []
    for mode in modes:
        mode = mode.upper()
        hyps = decode_corpus(model, src, ref, mode)
        rep = bleu(hyps, ref)
        k = "" if cfg["k"] is None else cfg["k"]
        rows.append([manifest["model_tag"], cfg["objective"], cfg["schedule"] or "", k, cfg["lam"], cfg["seed"],
                     mode, rep.score, len(ref)])
        sent = write_csv(run_dir / f"sentences_{split}_{mode}.csv", ("index", "sentence_bleu"),
                         ([i, 100.0 * sentence_bleu(h, r)] for i, (h, r) in enumerate(zip(hyps, ref))))
        bins = write_csv(run_dir / f"length_bins_{split}_{mode}.csv", BIN_COLUMNS,
                         ([lo, hi, 100.0 * b, n] for lo, hi, b, n in length_binned_bleu(hyps, ref, bin_width)))
        add_artifact(run_dir, f"sentences_{split}_{mode}", sent.name)
        add_artifact(run_dir, f"length_bins_{split}_{mode}", bins.name)
    out = write_csv(run_dir / f"eval_{split}.csv", EVAL_COLUMNS, rows)
    add_artifact(run_dir, f"eval_{split}", out.name)
    return rows


def attribute_run(run_dir, data_dir=None, split: str = "test", positions=None, max_pairs: int = 100,
                  prefix: str = "gold", config: LrpConfig = LrpConfig()) -> List[list]:
    run_dir = Path(run_dir)
    manifest = read_manifest(run_dir)
    corpus = load_split(_data_dir(run_dir, data_dir), split)
    model, sv, tv = load_run_model(run_dir)
    src, ref = encode_corpus(corpus, sv, tv)
    curve = contribution_curve(model, list(zip(src, ref)), positions, config, prefix, max_pairs)
    rows = [[p, v, n, manifest["model_tag"]] for p, v, n in curve]
    out = write_csv(run_dir / f"curve_{split}.csv", CURVE_COLUMNS, rows)
    add_artifact(run_dir, f"curve_{split}", out.name)
    return rows


def eval_bleu(run_dir, split: str, mode: str) -> float:
    """BLEU (x100) of a run for one split/mode, computing it if missing."""
    path = Path(run_dir) / f"eval_{split}.csv"
    if not path.exists():
        evaluate_run(run_dir, split=split)
    for row in read_csv(path):
        if row["mode"] == mode.upper():
            return float(row["bleu"])
    raise KeyError(f"no {mode} row in {path}")


# -- sweeps -------------------------------------------------------------------

def sweep(data_dir, runs_root, base: TrainConfig, schedules: Sequence[str], ks: Sequence[float],
          lams: Sequence[float], seeds: Sequence[int], split: str = "test", out=None, jobs: int = 1
          ) -> List[list]:
    """One row per (schedule, k, lambda, seed) cell; lambda = 0 cells are plain SS."""
    corpus = load_split(data_dir, "train")
    cells = [(s, float(k), float(lam), int(seed)) for s in schedules for k in ks for lam in lams for seed in seeds]
    if not cells:
        raise ValueError("empty sweep grid")

    def cell_config(schedule, k, lam, seed):
        return replace(base, objective="ss-ewc" if lam > 0 else "ss", schedule=schedule, k=k, lam=lam, seed=seed)

    # warmups are shared by all cells of a seed; build them first so parallel cells never race
    for seed in sorted(set(c[3] for c in cells)):
        cfg = cell_config(*cells[0][:3], seed)
        if 0 < cfg.warmup < cfg.max_updates:
            try:
                ensure_run(runs_root, warmup_config(cfg), corpus, data_dir, share_warmup=False, role="warmup")
            except TrainingDiverged as exc:  # every cell of this seed will record the failure
                logger.warning("shared warmup for seed %d failed: %s", seed, exc)

    def run_cell(cell):
        schedule, k, lam, seed = cell
        try:
            d = ensure_run(runs_root, cell_config(schedule, k, lam, seed), corpus, data_dir)
            return [schedule, k, lam, seed, eval_bleu(d, split, "MP"), eval_bleu(d, split, "TF"), "ok"]
        except Exception as exc:  # a failed cell is reported, the sweep goes on
            logger.warning("sweep cell %s failed: %s", cell, exc)
            return [schedule, k, lam, seed, "", "", f"failed: {type(exc).__name__}: {exc}"]

    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell_job, [(data_dir, runs_root, cell_config(*c), split, c) for c in cells]))
    else:
        rows = [run_cell(c) for c in cells]
    if out is not None:
        write_csv(out, SWEEP_COLUMNS, rows)
    return rows


def _run_cell_job(args):
    data_dir, runs_root, cfg, split, cell = args
    schedule, k, lam, seed = cell
    try:
        d = ensure_run(runs_root, cfg, load_split(data_dir, "train"), data_dir)
        return [schedule, k, lam, seed, eval_bleu(d, split, "MP"), eval_bleu(d, split, "TF"), "ok"]
    except Exception as exc:
        return [schedule, k, lam, seed, "", "", f"failed: {type(exc).__name__}: {exc}"]
