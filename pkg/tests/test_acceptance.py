"""Acceptance criteria 1-11, one test each.

Every test records a single ``PASS criterion N: ...`` or ``FAIL criterion N: ...``
line, printed immediately and repeated in the terminal summary. Criteria
6-9 share one end-to-end lexswap experiment (see ``experiment.py``), which
takes several CPU minutes.
"""

import math
import statistics
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import spearmanr

from conftest import ACCEPTANCE_LINES, ARCHS, randomize, random_sentence, tiny_model
from experiment import DEFAULT_K, KS, SEEDS, SWEEP_LAMS
from oracles import random_graph
from sslab import runner
from sslab.attribution import forced_pass, lrp_linear_rule, relevance_for_step
from sslab.autodiff import grad_check
from sslab.cli import main
from sslab.datagen import Corpus, gen_task
from sslab.evaluation import bleu, sign_test
from sslab.training import EwcAnchor, ScheduleState, TrainConfig, ewc_penalty, make_batch, nll_loss, \
    schedule_prob, train


def verdict(n: int, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def test_criterion_01_gradient_correctness():
    t0 = time.process_time()
    worst = 0.0
    rng = np.random.default_rng(2024)
    for _ in range(100):
        g, _, _ = random_graph(rng, int(rng.integers(2, 12)))
        worst = max(worst, grad_check(g, "loss"))
    batch = make_batch([[3, 4, 5], [6, 5]], [[4, 3, 6], [5, 6]])
    for arch in ARCHS:
        model = randomize(tiny_model(arch, emb_dim=4, hidden_dim=4, vocab=7, layers=1))
        g = model.graph()
        g.output("loss", nll_loss(model, batch, g=g))
        worst = max(worst, grad_check(g, "loss"))
    cpu = time.process_time() - t0
    verdict(1, worst <= 1e-4 and cpu < 120,
            f"max grad_check error {worst:.2e} (<= 1e-4) over 100 graphs + lstm + transformer, {cpu:.1f}s CPU")


def test_criterion_02_lrp_conservation():
    rng = np.random.default_rng(7)
    worst, steps = 0.0, 0
    for arch in ARCHS:
        model = tiny_model(arch, seed=11)
        for _ in range(50):
            src, tgt = random_sentence(rng, lo=2, hi=8), random_sentence(rng, lo=2, hi=8)
            fp = forced_pass(model, src, tgt)
            for t in range(1, fp.steps + 1):
                worst = max(worst, abs(relevance_for_step(fp, t).total - 1.0))
                steps += 1
    hand = lrp_linear_rule([1.0, 1.0], [[3.0], [1.0]], [1.0])
    hand_err = float(np.abs(hand - [0.75, 0.25]).max())
    verdict(2, worst <= 1e-6 and hand_err <= 1e-12,
            f"max |sum r - 1| = {worst:.1e} over {steps} steps; linear rule error {hand_err:.1e}")


def test_criterion_03_schedules():
    cases = [(ScheduleState("exponential", 0.9, 0), 1.0), (ScheduleState("linear", 0.01, 50, 1.0), 0.5),
             (ScheduleState("inverse-sigmoid", 10.0, 0), 10 / 11)]
    err = max(abs(schedule_prob(s) - want) for s, want in cases)
    violations = []

    @settings(max_examples=1000, deadline=None, database=None)
    @given(st.sampled_from(["linear", "exponential", "inverse-sigmoid"]), st.floats(0, 1),
           st.floats(1e-6, 1 - 1e-6), st.floats(1.0, 1e3), st.integers(0, 9999))
    def monotone(kind, p0, k_small, k_big, b):
        k = k_big if kind == "inverse-sigmoid" else k_small
        a = schedule_prob(ScheduleState(kind, k, b, p0))
        c = schedule_prob(ScheduleState(kind, k, b + 1, p0))
        if c > a:
            violations.append((kind, k, b, p0))

    monotone()
    verdict(3, err <= 1e-12 and not violations,
            f"example error {err:.1e}; {len(violations)} monotonicity violations in 1000 cases")


def test_criterion_04_objective_reductions():
    corpus = Corpus(gen_task("lexswap", 40, (3, 6), 8, seed=0).pairs)
    small = dict(arch="lstm", emb_dim=8, hidden_dim=8, batch_size=4, max_updates=100, warmup_updates=10,
                 fisher_samples=5, lr=1e-2, finetune_lr=3e-3)

    def same(a, b):
        return [r["loss"] for r in a.history] == [r["loss"] for r in b.history] and all(
            a.checkpoint.params[k].tobytes() == b.checkpoint.params[k].tobytes() for k in a.checkpoint.params)

    mle = train(TrainConfig(objective="mle", **small), corpus)
    ss1 = train(TrainConfig(objective="ss", schedule="none", p0=1.0, **small), corpus)
    ss = train(TrainConfig(objective="ss", k=5.0, **small), corpus)
    ewc0 = train(TrainConfig(objective="ss-ewc", k=5.0, lam=0.0, **small), corpus)
    hand = ewc_penalty({"w": np.array([0.5])}, EwcAnchor({"w": np.array([0.0])}, {"w": np.array([2.0])}, 1.0))
    verdict(4, same(mle, ss1) and same(ss, ewc0) and hand == 0.5,
            f"SS(p=1)==MLE bitwise: {same(mle, ss1)}; SS+EWC(lam=0)==SS bitwise: {same(ss, ewc0)}; "
            f"hand penalty {hand}")


def test_criterion_05_bleu_cases():
    got = [bleu([[3, 4, 5, 6, 7]], [[3, 4, 5, 6, 7]]).bleu,
           bleu([["the"] * 3], [["the", "cat", "sat"]]).bleu,
           bleu([list("abcd")], [list("abcde")]).bleu]
    want = [1.0, 0.0, math.exp(1 - 5 / 4)]
    err = max(abs(a - b) for a, b in zip(got, want))
    verdict(5, err <= 1e-9 and abs(got[2] - 0.77880) < 1e-5,
            f"BLEU {', '.join(f'{x:.5f}' for x in got)}; max error {err:.1e}")


# -- empirical criteria --------------------------------------------------------

def _median(values):
    return statistics.median(values)


@pytest.mark.slow
def test_criterion_06_forgetting_direction(experiment):
    d_mle = _median([s["TF"] - s["MP"] for s in experiment["mle"].values()])
    d_ss = _median([s["TF"] - s["MP"] for s in experiment["ss"].values()])
    cpu = experiment["cpu_seconds"]["main_runs"]
    verdict(6, d_mle > 0 and d_ss < 0 and cpu < 1200,
            f"median delta TF-MP: MLE {d_mle:+.2f} (want > 0), SS k={DEFAULT_K:g} {d_ss:+.2f} (want < 0); "
            f"{cpu / 60:.1f} min CPU")


@pytest.mark.slow
def test_criterion_07_ewc_vs_ss(experiment):
    lam = experiment["best_lam"]
    ewc = [experiment["ewc"][(lam, s)] for s in SEEDS]
    ss = list(experiment["ss"].values())
    mp_e, mp_s = _median([x["MP"] for x in ewc]), _median([x["MP"] for x in ss])
    tf_e, tf_s = _median([x["TF"] for x in ewc]), _median([x["TF"] for x in ss])
    verdict(7, mp_e >= mp_s and tf_e > tf_s,
            f"lambda={lam:g} (picked on valid): MP {mp_e:.2f} vs SS {mp_s:.2f} (want >=), "
            f"TF {tf_e:.2f} vs SS {tf_s:.2f} (want >)")


@pytest.mark.slow
def test_criterion_08_source_contribution_curves(experiment):
    curves = experiment["curves"]
    med = {}
    for name in ("mle", "ss"):
        positions = [p for p, _ in curves[(name, SEEDS[0])]]
        med[name] = [_median([dict(curves[(name, s)])[p] for s in SEEDS]) for p in positions]
    rho = {name: spearmanr(range(len(v)), v)[0] for name, v in med.items()}
    last_ss, last_mle = med["ss"][-1], med["mle"][-1]
    ok = all(r < 0 for r in rho.values()) and last_ss >= last_mle
    verdict(8, ok, f"Spearman rho MLE {rho['mle']:+.3f}, SS {rho['ss']:+.3f} (want < 0); "
                   f"last position SS {last_ss:.4f} vs MLE {last_mle:.4f} (want >=)")


@pytest.mark.slow
def test_criterion_09_sweep_heatmap(experiment):
    rows = [r for r in experiment["sweep"] if r["status"] == "ok"]
    med = {}
    for k in KS:
        for lam in SWEEP_LAMS:
            med[(k, lam)] = _median([float(r["mp_bleu"]) for r in rows if float(r["k"]) == k
                                     and float(r["lambda"]) == lam])
    cells = [(k, lam) for k in KS for lam in SWEEP_LAMS if lam > 0]
    wins = sum(med[c] > med[(c[0], 0.0)] for c in cells)
    verdict(9, wins * 3 >= 2 * len(cells),
            f"{wins}/{len(cells)} lambda>0 cells beat the lambda=0 cell at the same k (want >= 2/3); "
            + "; ".join(f"k={k:g}: " + "/".join(f"{med[(k, lam)]:.2f}" for lam in SWEEP_LAMS) for k in KS))


def test_criterion_10_determinism(tmp_path, capsys):
    tiny = ["--emb-dim", "8", "--hidden-dim", "8", "--batch-size", "8", "--max-updates", "8",
            "--warmup-updates", "4", "--fisher-samples", "4"]
    outputs = []
    for rep in ("a", "b"):
        root = tmp_path / rep
        data = root / "data"
        assert main(["gen-data", "--task", "lexswap", "--n", "80", "--length-min", "2", "--length-max", "6",
                     "--vocab-size", "8", "--seed", "3", "--out", str(data)]) == 0
        assert main(["train", "--data", str(data), "--runs", str(root / "runs"), "--objective", "ss-ewc",
                     "--lambda", "0.5", "--k", "3"] + tiny) == 0
        run = capsys.readouterr().out.strip().splitlines()[-1]
        assert main(["eval", "--run", run]) == 0
        assert main(["attribute", "--run", run, "--positions", "1-4", "--max-pairs", "4"]) == 0
        assert main(["sweep", "--data", str(data), "--runs", str(root / "runs"), "--k-grid", "2,4",
                     "--lambda-grid", "0,0.5", "--seeds", "0"] + tiny) == 0
        assert main(["report", "--runs", str(root / "runs"), "--out", str(root / "report")]) == 0
        capsys.readouterr()
        files = sorted(p for p in root.rglob("*") if p.suffix in (".csv", ".txt") and p.parent.name != "data")
        files += sorted((data).glob("*.txt"))
        outputs.append({str(p.relative_to(root)): p.read_bytes() for p in files})
    a, b = outputs
    differing = sorted(k for k in a if a[k] != b.get(k))
    verdict(10, a.keys() == b.keys() and not differing and len(a) > 10,
            f"{len(a)} CSV/text outputs compared across two reruns, {len(differing)} differ")


def test_criterion_11_sign_test():
    got = [sign_test([1.0] * 10, [0.0] * 10), sign_test([1, 0] * 5, [0, 1] * 5), sign_test([0.4] * 6, [0.4] * 6)]
    want = [2 * 0.5 ** 10, 1.0, 1.0]
    err = max(abs(a - b) for a, b in zip(got, want))
    verdict(11, err <= 1e-9 and abs(got[0] - 0.001953) < 1e-6,
            f"p-values {got[0]:.6f}, {got[1]:g}, {got[2]:g}; max error {err:.1e}")
