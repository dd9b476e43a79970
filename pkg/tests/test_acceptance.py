"""End-to-end acceptance checks, one test per criterion.

The semi-supervised runs (criteria 5, 6 and 8) take roughly forty minutes each
on one CPU core; they are trained once per session and shared.  Select this
module alone with ``pytest tests/test_acceptance.py -s`` to watch the
per-criterion lines as they are produced.
"""

import math
import time
import warnings

import numpy as np
import pytest

from dihc import cli
from dihc import data as D
from dihc import gradcheck as GC
from dihc import losses as L
from dihc import metrics as M
from dihc import trainer as TR
from dihc.tensor import Tensor
from oracles import (
    oracle_dice,
    oracle_dihc,
    oracle_directed,
    oracle_mc,
    oracle_p95,
    oracle_ramp,
    oracle_sharpen,
    oracle_surface,
    random_mask,
    random_preds,
)

SHAPE = (32, 32, 32)
SEEDS = (0, 1, 2)
TRAIN_SEED, TEST_SEED = 100, 200


# -- shared fixtures ----------------------------------------------------------


@pytest.fixture(scope="session")
def acceptance_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_data")
    assert cli.main(["gen-data", "--out", str(root / "train"), "--n", "20", "--seed", str(TRAIN_SEED)]) == 0
    assert cli.main(["gen-data", "--out", str(root / "test"), "--n", "5", "--seed", str(TEST_SEED)]) == 0
    train, _ = D.load_dataset(root / "train")
    test, test_ids = D.load_dataset(root / "test")
    return {"root": root, "train": train, "test": test, "test_ids": test_ids}


@pytest.fixture(scope="session")
def semi_supervised_runs(acceptance_data, tmp_path_factory):
    """Full method and consistency-disabled baseline for every seed: {(kind, seed): (result, seconds)}."""
    out = tmp_path_factory.mktemp("acceptance_runs")
    runs = {}
    for seed in SEEDS:
        for kind, consistency in (("full", True), ("baseline", False)):
            cfg = TR.TrainConfig(seed=seed, labelled_fraction=0.1, t_max=1000, enable_consistency=consistency)
            split = D.split(acceptance_data["train"], cfg.labelled_fraction, seed)
            start = time.perf_counter()
            res = TR.run(cfg, split, acceptance_data["test"], acceptance_data["test_ids"], out / f"{kind}_s{seed}")
            runs[kind, seed] = (res, time.perf_counter() - start)
    return runs


def final_dice(res) -> float:
    step, agg = res.evals[-1]
    assert step == 1000
    return agg.dice


# -- criterion 1 --------------------------------------------------------------


def test_criterion_1_gradient_suite(verdict, capsys):
    start = time.perf_counter()
    results = GC.run_suite(seed=0, n_seeds=GC.DEFAULT_SEEDS)
    code = cli.main(["gradcheck", "--seed", "0"])
    elapsed = time.perf_counter() - start
    worst = max(r.worst_error for r in results)
    ok = (code == 0 and all(r.passed for r in results) and GC.DEFAULT_SEEDS >= 20
          and sorted(r.name for r in results) == sorted(GC.OPS) and elapsed < 300)
    verdict(1, ok, f"{len(results)} ops x {GC.DEFAULT_SEEDS} seeds, worst rel err {worst:.2e}, "
                   f"exit {code}, {elapsed:.0f}s (suite run twice)")
    assert ok


# -- criterion 2 --------------------------------------------------------------


def test_criterion_2_formula_oracles(verdict):
    rng = np.random.default_rng(2024)
    errs = {"sharpen": 0.0, "ramp": 0.0, "dice": 0.0, "l_mc": 0.0, "l_dihc": 0.0}
    for _ in range(100):
        temp = float(rng.uniform(0.05, 1.5))
        p = rng.uniform(0, 1, 8)
        got = L.sharpen(Tensor(p), L.SharpenConfig(temp)).data
        errs["sharpen"] = max(errs["sharpen"], float(np.max(np.abs(got - [oracle_sharpen(v, temp) for v in p]))))

        t_max = int(rng.integers(1, 5000))
        t = int(rng.integers(0, t_max + 1))
        errs["ramp"] = max(errs["ramp"], abs(L.ramp_weight(t, L.RampSchedule(t_max)) - oracle_ramp(t, t_max)))

        pd = rng.uniform(0, 1, (2, 3, 4))
        y = (rng.random((2, 3, 4)) < 0.4).astype(np.float64)
        errs["dice"] = max(errs["dice"], abs(L.dice_loss(Tensor(pd), y).item() - oracle_dice(pd, y)))

        arrays, preds = random_preds(rng, shape=(1, 2, 2, 2))
        errs["l_mc"] = max(errs["l_mc"], abs(L.mutual_consistency_loss(preds).item() - oracle_mc(arrays)))
        errs["l_dihc"] = max(errs["l_dihc"], abs(L.diagonal_consistency_loss(preds).item() - oracle_dihc(arrays)))
    pairs = {(p.producer, p.consumer, p.scale) for p in L.PAIRING.dihc_pairs}
    table_ok = (len(L.PAIRING.dihc_pairs) == 6 and len(pairs) == 6
                and pairs == {(1, 3, 2), (1, 2, 3), (2, 1, 2), (2, 3, 3), (3, 2, 2), (3, 1, 3)}
                and all(p.producer != p.consumer for p in L.PAIRING.dihc_pairs))
    ok = table_ok and all(v <= 1e-6 for v in errs.values())
    verdict(2, ok, "max abs err " + ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
            + f"; dihc table {'ok' if table_ok else 'WRONG'}")
    assert ok


# -- criterion 3 --------------------------------------------------------------


def test_criterion_3_metric_oracles(verdict):
    rng = np.random.default_rng(3)
    exact = pairs = 0
    symmetric = translated = True
    while pairs < 100:
        pm, gm = random_mask(rng), random_mask(rng)
        a, b = oracle_surface(pm), oracle_surface(gm)
        if not a or not b:
            continue
        pairs += 1
        d_ab, d_ba = oracle_directed(a, b), oracle_directed(b, a)
        want = ((float(np.mean(d_ab)) + float(np.mean(d_ba))) / 2, max(oracle_p95(d_ab), oracle_p95(d_ba)))
        got = M.mask_surface_distances(pm, gm)
        exact += got == want
        symmetric &= M.mask_surface_distances(gm, pm) == got
        big_p, big_g = np.zeros((12, 12, 12), bool), np.zeros((12, 12, 12), bool)
        big_p[2:10, 2:10, 2:10], big_g[2:10, 2:10, 2:10] = pm, gm
        shift = tuple(int(s) for s in rng.integers(-2, 3, 3))
        moved = [np.roll(m, shift, axis=(0, 1, 2)) for m in (big_p, big_g)]
        translated &= M.mask_surface_distances(*moved) == M.mask_surface_distances(big_p, big_g)
    g = np.zeros((4, 4, 4), bool)
    g[:2, :2, :2] = True
    p = np.zeros_like(g)
    p[:2, :2, 1:3] = True
    dice, jac = M.dice_jaccard(p, g)
    hand = dice == 50.0 and abs(jac - 100 / 3) < 1e-12 and M.dice_jaccard(g, g) == (100.0, 100.0)
    ok = exact == pairs and symmetric and translated and hand
    verdict(3, ok, f"bit-exact {exact}/{pairs} pairs, symmetric {symmetric}, translation-invariant {translated}, "
                   f"hand counts {'ok' if hand else 'WRONG'}")
    assert ok


# -- criterion 4 --------------------------------------------------------------


def test_criterion_4_overfit_probe(verdict):
    sample = D.generate_synthetic(1, SHAPE, seed=300)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        split = D.split(sample, 1.0, 0)
        cfg = TR.TrainConfig(t_max=300, labelled_fraction=1.0, enable_consistency=False, augment=False,
                             labelled_per_batch=1)
        start = time.perf_counter()
        res = TR.run(cfg, split)
    elapsed = time.perf_counter() - start
    report = TR.evaluate(res.trainer.models, sample)[0]
    ok = report.dice >= 95 and elapsed < 600
    verdict(4, ok, f"model-1 Dice {report.dice:.2f} on the training sample after 300 steps, {elapsed:.0f}s")
    assert ok


# -- criterion 5 --------------------------------------------------------------


def test_criterion_5_semi_supervised(semi_supervised_runs, verdict):
    full = [final_dice(semi_supervised_runs["full", s][0]) for s in SEEDS]
    base = [final_dice(semi_supervised_runs["baseline", s][0]) for s in SEEDS]
    slowest = max(sec for _, sec in semi_supervised_runs.values())
    part_a = min(full) >= 80
    part_b = float(np.mean(full)) > float(np.mean(base))
    ok = part_a and part_b and slowest < 45 * 60
    verdict(5, ok, f"full Dice {[round(d, 2) for d in full]} (mean {np.mean(full):.2f}) vs baseline "
                   f"{[round(d, 2) for d in base]} (mean {np.mean(base):.2f}); (a) {'ok' if part_a else 'FAIL'}, "
                   f"(b) {'ok' if part_b else 'FAIL'}; slowest run {slowest / 60:.1f} min")
    assert ok


def test_trained_beats_untrained(semi_supervised_runs, acceptance_data):
    res, _ = semi_supervised_runs["full", 0]
    fresh = TR.Trainer(res.trainer.cfg, res.trainer.split)
    before = M.aggregate(fresh.evaluate(acceptance_data["test"])).dice
    after = final_dice(res)
    assert after - before >= 30, (before, after)


# -- criterion 6 --------------------------------------------------------------


def test_criterion_6_disagreement_trend(semi_supervised_runs, verdict):
    trend = []
    for s in SEEDS:
        col = semi_supervised_runs["full", s][0].log.column("disagreement")
        trend.append((col[0], col[-1]))
    ok = all(end < start for start, end in trend)
    verdict(6, ok, "disagreement t=0 -> t_max: " + ", ".join(f"{a:.4f}->{b:.4f}" for a, b in trend))
    assert ok


# -- criterion 7 --------------------------------------------------------------


def test_criterion_7_reproducibility(acceptance_data, tmp_path, monkeypatch, verdict):
    monkeypatch.setenv("DIHC_THREADS", "1")
    root = acceptance_data["root"]
    common = ["--data", str(root / "train"), "--eval-data", str(root / "test"), "--labelled-fraction", "0.1",
              "--t-max", "12", "--eval-every", "4", "--seed", "3"]
    assert cli.main(["train", *common, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["train", *common, "--out", str(tmp_path / "b")]) == 0
    files = ("runlog.csv", "eval_history.csv", "eval.csv", "last.dckp")
    repeat = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)

    # interrupt a third run after 7 steps, then resume it from its checkpoint
    cfg = TR.TrainConfig(labelled_fraction=0.1, t_max=12, eval_every=4, seed=3)
    split = D.split(acceptance_data["train"], 0.1, 3)
    out = tmp_path / "c"
    TR.run(cfg, split, acceptance_data["test"], acceptance_data["test_ids"], out, stop_at=7)
    assert TR.read_checkpoint(out / "last.dckp")[0]["step"] == 7
    assert cli.main(["train", "--data", str(root / "train"), "--eval-data", str(root / "test"),
                     "--resume", str(out / "last.dckp"), "--out", str(out)]) == 0
    resumed = all((out / f).read_bytes() == (tmp_path / "a" / f).read_bytes() for f in files)
    ok = repeat and resumed
    verdict(7, ok, f"repeat run byte-identical {repeat}; resume from step 7 byte-identical {resumed} "
                   f"({', '.join(files)}; DIHC_THREADS=1)")
    assert ok


# -- criterion 8 --------------------------------------------------------------


def test_criterion_8_schedule(semi_supervised_runs, verdict):
    details, ok = [], True
    for s in SEEDS:
        lam = semi_supervised_runs["full", s][0].log.column("lambda_cst")
        start_ok = abs(lam[0] - 0.1 * math.exp(-5)) <= 1e-8
        end_ok = lam[-1] == 0.1
        mono = all(b >= a for a, b in zip(lam, lam[1:]))
        ok &= start_ok and end_ok and mono and len(lam) == 1000
        details.append(f"seed {s}: {lam[0]:.10f} -> {lam[-1]!r}, non-decreasing {mono}")
    verdict(8, ok, "; ".join(details))
    assert ok

