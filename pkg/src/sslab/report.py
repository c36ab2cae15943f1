"""Aggregate finished runs into result tables (CSV plus a plain-text rendering)."""

from __future__ import annotations

import statistics
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

from .evaluation import forgetting_delta, sign_test
from .runner import MANIFEST, fmt, read_csv, read_manifest, write_csv


class ReportError(ValueError):
    pass


def collect_runs(roots: Sequence) -> List[Tuple[Path, dict]]:
    """Finished final runs below the given run roots (or run directories)."""
    found = []
    for root in roots:
        root = Path(root)
        dirs = [root] if (root / MANIFEST).exists() else sorted(p.parent for p in root.glob(f"*/{MANIFEST}"))
        for d in dirs:
            m = read_manifest(d)
            if m.get("role") == "final" and m.get("status") == "complete":
                found.append((d, m))
    if not found:
        raise ReportError("no completed runs found")
    hashes = {m["corpus_hash"] for _, m in found}
    if len(hashes) > 1:
        raise ReportError(f"runs were trained on {len(hashes)} different corpora")
    return sorted(found, key=lambda x: x[1]["run_id"])


def _key(cfg: dict) -> tuple:
    return (cfg["arch"], cfg["objective"], cfg["schedule"] or "", "" if cfg["k"] is None else cfg["k"],
            cfg["lam"] if cfg["objective"] == "ss-ewc" else 0.0)


def _mean_std(values: List[float]) -> Tuple[float, object]:
    mean = statistics.fmean(values)
    return mean, (statistics.stdev(values) if len(values) > 1 else "")


def _artifact(run_dir: Path, manifest: dict, key: str) -> Path:
    name = manifest.get("artifacts", {}).get(key)
    if name is None:
        raise ReportError(f"run {manifest['run_id']} has no {key} artifact; run eval first")
    return run_dir / name


def build_report(roots: Sequence, out_dir, split: str = "test") -> Dict[str, Path]:
    runs = collect_runs(roots)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    scores: Dict[tuple, Dict[str, Dict[int, float]]] = defaultdict(lambda: defaultdict(dict))
    sentences: Dict[tuple, Dict[str, Dict[int, List[float]]]] = defaultdict(lambda: defaultdict(dict))
    curves, bins = [], []
    for run_dir, m in runs:
        key, seed = _key(m["config"]), m["seed"]
        for row in read_csv(_artifact(run_dir, m, f"eval_{split}")):
            scores[key][row["mode"]][seed] = float(row["bleu"])
        for mode in ("MP", "TF"):
            name = m.get("artifacts", {}).get(f"sentences_{split}_{mode}")
            if name:
                sentences[key][mode][seed] = [float(r["sentence_bleu"]) for r in read_csv(run_dir / name)]
            name = m.get("artifacts", {}).get(f"length_bins_{split}_{mode}")
            if name:
                for r in read_csv(run_dir / name):
                    bins.append([m["model_tag"], mode, r["bin_low"], r["bin_high"], r["bleu"], r["n_pairs"]])
        name = m.get("artifacts", {}).get(f"curve_{split}")
        if name:
            for r in read_csv(run_dir / name):
                curves.append([r["position"], r["mean_source_contribution"], r["n_sentences"], r["model_tag"]])

    keys = sorted(scores, key=lambda k: tuple(str(x) for x in k))
    head = ["arch", "objective", "schedule", "k", "lambda"]
    t1, t2 = [], []
    for key in keys:
        mp = scores[key].get("MP", {})
        tf = scores[key].get("TF", {})
        if mp:
            mean, std = _mean_std(list(mp.values()))
            t1.append(list(key) + [len(mp), mean, std])
        if mp and tf:
            mp_mean, tf_mean = statistics.fmean(mp.values()), statistics.fmean(tf.values())
            t2.append(list(key) + [len(mp), mp_mean, tf_mean, forgetting_delta(mp_mean, tf_mean)])

    t3 = []
    for key in keys:
        arch, objective, schedule, k, lam = key
        base = (arch, "ss", schedule, k, 0.0)
        if objective != "ss-ewc" or base not in scores:
            continue
        row = list(key)
        for mode in ("MP", "TF"):
            ewc, ss = scores[key].get(mode, {}), scores[base].get(mode, {})
            seeds = sorted(set(ewc) & set(ss))
            if not seeds:
                row += ["", "", "", ""]
                continue
            a = statistics.fmean(ewc[s] for s in seeds)
            b = statistics.fmean(ss[s] for s in seeds)
            sa, sb = sentences[key][mode], sentences[base][mode]
            paired = [s for s in seeds if s in sa and s in sb]
            p = sign_test(sum((sa[s] for s in paired), []), sum((sb[s] for s in paired), [])) if paired else ""
            row += [a, b, a - b, p]
        t3.append(row)

    files = {
        "table1": write_csv(out / "table1_bleu.csv", head + ["n_seeds", "mp_bleu_mean", "mp_bleu_std"], t1),
        "table2": write_csv(out / "table2_forgetting.csv", head + ["n_seeds", "mp_bleu", "tf_bleu", "delta"], t2),
        "table3": write_csv(out / "table3_ewc_vs_ss.csv", head + [
            "mp_ss_ewc", "mp_ss", "mp_delta_ss", "mp_sign_p", "tf_ss_ewc", "tf_ss", "tf_delta_ss", "tf_sign_p"], t3),
        "curves": write_csv(out / "source_contribution_curves.csv",
                            ("position", "mean_source_contribution", "n_sentences", "model_tag"), curves),
        "length_bins": write_csv(out / "length_bins.csv",
                                 ("model_tag", "mode", "bin_low", "bin_high", "bleu", "n_pairs"), bins),
    }
    files["text"] = out / "report.txt"
    files["text"].write_text(render_text(head, t1, t2, t3), encoding="utf-8", newline="\n")
    return files


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.2f}"
    return str(v)


def _table(title: str, columns: Sequence[str], rows: List[list]) -> str:
    cells = [list(columns)] + [[_cell(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    lines = [title, "=" * len(title)]
    for j, r in enumerate(cells):
        lines.append("  ".join(c.rjust(w) for c, w in zip(r, widths)))
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render_text(head, t1, t2, t3) -> str:
    t1_rows = [r[:5] + [r[5], f"{r[6]:.2f}" + ("" if r[7] == "" else f" +- {r[7]:.2f}")] for r in t1]
    parts = [
        _table("BLEU (model prefix), mean +- std over seeds", head + ["seeds", "BLEU"], t1_rows),
        _table("Teacher-forced inference (delta = TF - MP)", head + ["seeds", "MP", "TF", "delta"], t2),
        _table("SS+EWC against SS with the same schedule and k",
               head + ["MP", "MP ss", "dMP", "p", "TF", "TF ss", "dTF", "p"], t3),
    ]
    return "\n".join(parts)
