"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Criteria 5 to 8 share one module-scoped model cache trained from the default
run configuration; the first test to need a model pays for its training.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from c2fs import substrate as ops
from c2fs.calibrate import CalibrationConfig, calibrate_class, calibrate_support, init_prototype
from c2fs.config import RunConfig
from c2fs.data import generate_synthetic
from c2fs.evaluate import (AblationGrid, AblationRow, EvalReport, ci95, evaluate, format_table,
                           layer_probe, run_ablation, sample_episodes)
from c2fs.losses import ContrastiveState
from c2fs.model import build_model
from c2fs.repository import FeatureRepository, normalize_rows
from c2fs.trainer import Trainer, TrainConfig

from gradcheck import finite_diff_check, finite_diff_params
from oracles import brute_calibration_trace, brute_knn, ci95_reference, random_repository
from test_losses import kink_free_setup
from test_substrate import OPS

SEEDS = (0, 1, 2)
TABLE_EPISODES = 500
SWEEP_EPISODES = 100


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}")
        return ok
    return emit


@pytest.fixture(scope="module")
def bench():
    torch.set_num_threads(1)
    cfg = RunConfig.from_dict({"seed": 0})
    train = generate_synthetic(cfg.synth_config(), cfg.data.train_per_fine, "train")
    test = generate_synthetic(cfg.synth_config(), cfg.data.test_per_fine, "test")
    probe = generate_synthetic(cfg.synth_config(), cfg.data.test_per_fine, "probe")
    return {"cfg": cfg, "train": train, "test": test, "probe": probe, "cache": {}}


def grid_for(bench, rows, episodes):
    cfg, train = bench["cfg"], bench["train"]
    return AblationGrid(rows, train, bench["test"],
                        cfg.encoder_config(train.sample_shape, train.hierarchy.coarse_count),
                        cfg.train_config(), alpha=cfg.training.alpha, way="all", shot=1,
                        queries=cfg.evaluation.queries_per_class, episodes=episodes,
                        episode_seed=cfg.evaluation.episode_seed, train_seeds=SEEDS,
                        calibration=cfg.calibration_config())


def accuracies(rows):
    return {r["name"]: r["report"] for r in rows}


# ---------------------------------------------------------------- 1


def test_criterion_1_gradients(report, small_vector_cfg, small_image_cfg):
    t0 = time.time()
    worst = {}
    for name, (make, fn) in sorted(OPS.items()):
        for trial in range(3):
            g = torch.Generator().manual_seed(7 + 31 * trial + len(name))
            err = finite_diff_check(fn, [x.double() for x in make(g)], step=1e-4)
            worst[name] = max(worst.get(name, 0.0), err)
    for label, cfg, n in (("composite-vector", small_vector_cfg, 6), ("composite-image", small_image_cfg, 2)):
        model, loss = kink_free_setup(cfg, n)
        params = list(model.trainable_parameters().values())
        worst[label] = finite_diff_params(loss, params, step=1e-4)
    elapsed = time.time() - t0
    bad = {k: v for k, v in worst.items() if not v < 1e-5}
    ok = not bad and elapsed < 120
    assert report(1, ok, f"{len(worst)} checks, max rel err {max(worst.values()):.2e} (< 1e-5), "
                         f"{elapsed:.1f}s (< 120s)" + (f", failing {bad}" if bad else ""))


# ---------------------------------------------------------------- 2


def bounded_repository(rng, dim, coarse_count, max_per_class=50):
    sizes = rng.integers(1, max_per_class + 1, coarse_count)
    coarse = np.repeat(np.arange(coarse_count), sizes)
    rng.shuffle(coarse)
    return FeatureRepository.from_raw(rng.standard_normal((len(coarse), dim)), coarse, coarse_count)


def test_criterion_2_calibration_oracle(report):
    rng = np.random.default_rng(2024)
    t0 = time.time()
    mismatches, worst = 0, 0.0
    for _ in range(50):
        dim = int(rng.integers(2, 9))
        coarse_count = int(rng.integers(1, 5))
        repo = bounded_repository(rng, dim, coarse_count)
        y = int(rng.integers(0, coarse_count))
        pool = len(repo.subset_by_coarse(y))
        n = int(rng.integers(1, min(20, pool) + 1))
        m = int(rng.integers(1, min(5, n) + 1))
        support = normalize_rows(rng.standard_normal((int(rng.integers(1, 6)), dim)))
        proto = init_prototype(support)
        proto.assigned_coarse = y
        got, idx, rounds = calibrate_class(proto, repo, CalibrationConfig(k=1, m=m, n=n), support)
        want_idx, want_proto = brute_calibration_trace(repo.vectors(np.arange(len(repo))), repo.coarse,
                                                       support, y, m, n)
        mismatches += idx.tolist() != want_idx
        worst = max(worst, float(np.max(np.abs(got.vector - want_proto))))
    elapsed = time.time() - t0
    ok = mismatches == 0 and worst <= 1e-10 and elapsed < 60
    assert report(2, ok, f"50 instances, {mismatches} index-sequence mismatches, max prototype "
                         f"diff {worst:.1e} (<= 1e-10), {elapsed:.1f}s")


# ---------------------------------------------------------------- 3


def test_criterion_3_knn_oracle(report):
    rng = np.random.default_rng(77)
    t0 = time.time()
    checks = mismatches = 0
    for r in range(100):
        size = int(rng.integers(1, 1001))
        dim = int(rng.integers(2, 17))
        coarse_count = int(rng.integers(1, 5))
        repo = random_repository(rng, max(size, coarse_count), dim, coarse_count,
                                 duplicates=int(rng.integers(0, 10)) if size > 10 else 0)
        vecs = repo.vectors(np.arange(len(repo)))
        q = normalize_rows(rng.standard_normal((1, dim)))[0]
        k = int(rng.integers(1, min(20, len(repo)) + 1))
        cases = [(k, None, [])]
        y = int(rng.integers(0, coarse_count))
        pool = repo.subset_by_coarse(y)
        ex = rng.choice(pool, size=len(pool) // 3, replace=False).tolist() if len(pool) > 1 else []
        k_pool = min(k, len(pool) - len(ex))
        if k_pool > 0:
            cases += [(k_pool, y, []), (k_pool, y, ex)]
        ex_all = rng.choice(len(repo), size=min(len(repo) - k, 25), replace=False).tolist()
        cases.append((k, None, ex_all))
        for kk, restrict, exclude in cases:
            got = repo.knn(q, kk, restrict_to=restrict, exclude=exclude).tolist()
            mismatches += got != brute_knn(vecs, repo.coarse, q, kk, restrict, exclude)
            checks += 1
    elapsed = time.time() - t0
    ok = mismatches == 0 and elapsed < 60
    assert report(3, ok, f"100 repositories, {checks} queries incl. restrict/exclude, "
                         f"{mismatches} mismatches, {elapsed:.1f}s")


# ---------------------------------------------------------------- 4


def test_criterion_4_exact_contracts(report, tmp_path, small_vector_cfg, tiny_data):
    rng = np.random.default_rng(4)
    failures = []

    repo = random_repository(rng, 400, 6, 3)
    for n, m in [(100, 20), (37, 5), (20, 20), (7, 3), (1, 1)]:
        support = normalize_rows(rng.standard_normal((2, 6)))
        aug = calibrate_support(support, np.array([9, 9]), repo, CalibrationConfig(k=5, m=m, n=n))
        sel, y = aug.additional[9], aug.prototypes[9].assigned_coarse
        if len(sel) != n or len(set(sel.tolist())) != n:
            failures.append(f"|S_add| {len(sel)} != {n}")
        if aug.rounds[9] != math.ceil(n / m):
            failures.append(f"rounds {aug.rounds[9]} != ceil({n}/{m})")
        if set(repo.coarse[sel].tolist()) != {y}:
            failures.append("pool impurity")

    state = ContrastiveState(queue_capacity=5)
    batches = [torch.tensor(normalize_rows(rng.standard_normal((3, 4)))) for _ in range(3)]
    for b in batches:
        state.enqueue(b, torch.zeros(3, dtype=torch.long))
    if not torch.equal(state.queues[0], torch.cat(batches)[-5:]):
        failures.append("queue not FIFO")

    _, train_set, _ = tiny_data
    model = build_model(small_vector_cfg, seed=2)
    trainer = Trainer(model, TrainConfig(epochs=1, batch_size=16, ema_coeff=0.8, queue_capacity=16),
                      train_set)
    replay = [p.detach().clone().double() for p in model.momentum_parameters()]
    for idx in trainer.batches(0)[:6]:
        trainer.step(idx)
        for r, s in zip(replay, model.online_parameters()):
            r.mul_(0.8).add_(0.2 * s.detach().double())
    ema_err = max(float((r - p.double()).abs().max()) for r, p in zip(replay, model.momentum_parameters()))
    if not ema_err <= 1e-6:
        failures.append(f"EMA replay error {ema_err:.1e}")

    trainer.save(tmp_path / "a.c2fsckpt")
    back = ops.load_tensors(tmp_path / "a.c2fsckpt")
    orig = trainer.state_tensors()
    if set(back) != set(orig) or any(back[k].numpy().tobytes() != orig[k].numpy().tobytes() for k in orig):
        failures.append("checkpoint tensors differ")
    ops.save_tensors(tmp_path / "b.c2fsckpt", back)
    if (tmp_path / "a.c2fsckpt").read_bytes() != (tmp_path / "b.c2fsckpt").read_bytes():
        failures.append("checkpoint bytes differ")

    repo.save(tmp_path / "a.c2fsrepo")
    again = FeatureRepository.load(tmp_path / "a.c2fsrepo")
    again.save(tmp_path / "b.c2fsrepo")
    if (again.embeddings.tobytes() != repo.embeddings.tobytes()
            or (tmp_path / "a.c2fsrepo").read_bytes() != (tmp_path / "b.c2fsrepo").read_bytes()):
        failures.append("repository round trip differs")

    ok = not failures
    assert report(4, ok, f"S_add size/rounds/purity, FIFO, EMA replay err {ema_err:.1e}, "
                         f"checkpoint and repository round trips" + (f"; {failures}" if failures else ""))


# ---------------------------------------------------------------- 5


@pytest.mark.slow
def test_criterion_5_ablation_ordering(report, bench):
    rows = [AblationRow("baseline"), AblationRow("+REC", rec=True),
            AblationRow("+REC+ALIGN", rec=True, align=True),
            AblationRow("+REC+ALIGN+CD", rec=True, align=True, cd=True)]
    t0 = time.time()
    res = run_ablation(grid_for(bench, rows, TABLE_EPISODES), bench["cache"])
    elapsed = time.time() - t0
    bench["table"] = res
    acc = {k: 100 * v.mean_accuracy for k, v in accuracies(res).items()}
    b, r, ra, rac = acc["baseline"], acc["+REC"], acc["+REC+ALIGN"], acc["+REC+ALIGN+CD"]
    checks = {"baseline < +REC": b < r, "+REC <= +REC+ALIGN": r <= ra,
              "+REC+ALIGN < +CD": ra < rac, "CD gain >= 1": rac - ra >= 1.0,
              "runtime < 30 min": elapsed < 1800}
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    print(format_table(res))
    assert report(5, ok, f"baseline {b:.2f}, +REC {r:.2f}, +REC+ALIGN {ra:.2f}, +CD {rac:.2f} "
                         f"(gain {rac - ra:+.2f}), {TABLE_EPISODES} all-way episodes x seeds {SEEDS}, "
                         f"{elapsed / 60:.1f} min" + (f"; failed: {failed}" if failed else ""))


# ---------------------------------------------------------------- 6


@pytest.mark.slow
def test_criterion_6_layer_probe(report, bench):
    cache, cfg = bench["cache"], bench["cfg"]
    grid = grid_for(bench, [AblationRow("ce-only", contrastive=False),
                            AblationRow("full", rec=True, align=True)], 1)
    run_ablation(grid, cache)
    ce_probes = [layer_probe(cache[((False, False, False), s)], bench["probe"], bench["test"]) for s in SEEDS]
    full_probes = [layer_probe(cache[((True, True, True), s)], bench["probe"], bench["test"]) for s in SEEDS]
    mean = lambda probes, key: 100 * float(np.mean([p[key] for p in probes]))
    ce = {k: mean(ce_probes, k) for k in ce_probes[0]}
    full_emb = mean(full_probes, "embedding")
    best_mid = max(ce[k] for k in ("f1", "f2", "f3", "f4"))
    shape_ok = ce["embedding"] <= best_mid
    gain = full_emb - ce["embedding"]
    ok = shape_ok and gain >= 2.0
    layers = ", ".join(f"{k} {v:.1f}" for k, v in ce.items())
    assert report(6, ok, f"CE-only probes [{layers}]: embedding <= best intermediate {best_mid:.1f} "
                         f"is {shape_ok}; full-objective embedding {full_emb:.1f}, gain {gain:+.1f} "
                         f"(>= 2) over seeds {SEEDS}")


# ---------------------------------------------------------------- 7


@pytest.mark.slow
def test_criterion_7_coarse_assignment(report, bench):
    calib = bench["cfg"].calibration_config()
    rows = [AblationRow("true-coarse", True, True, True, calibration=replace(calib, use_true_coarse=True)),
            AblationRow("knn-vote", True, True, True, calibration=calib),
            AblationRow("all-features", True, True, True, calibration=replace(calib, pool="all"))]
    res = accuracies(run_ablation(grid_for(bench, rows, SWEEP_EPISODES), bench["cache"]))
    t, k, a = (100 * res[n].mean_accuracy for n in ("true-coarse", "knn-vote", "all-features"))
    ok = t >= k >= a
    assert report(7, ok, f"true coarse {t:.2f} >= kNN vote {k:.2f} >= all features {a:.2f}, "
                         f"{SWEEP_EPISODES} episodes x seeds {SEEDS}")


# ---------------------------------------------------------------- 8


@pytest.mark.slow
def test_criterion_8_sweeps(report, bench):
    calib = bench["cfg"].calibration_config()
    ns, ks = (0, 25, 50, 100, 200), (1, 5, 10, 20)
    rows = [AblationRow(f"n={n}", True, True, True, calibration=replace(calib, n=n, m=min(calib.m, max(n, 1))))
            for n in ns]
    rows += [AblationRow(f"k={k}", True, True, True, calibration=replace(calib, k=k)) for k in ks]
    res = accuracies(run_ablation(grid_for(bench, rows, SWEEP_EPISODES), bench["cache"]))
    n_acc = [100 * res[f"n={n}"].mean_accuracy for n in ns]
    n_ci = [100 * res[f"n={n}"].ci95_halfwidth for n in ns]
    k_acc = [100 * res[f"k={k}"].mean_accuracy for k in ks]
    rises = max(n_acc[1:]) > n_acc[0]
    peak = int(np.argmax(n_acc))
    bounded = peak < len(ns) - 1 or n_acc[-1] - n_acc[-2] <= max(n_ci[-1], n_ci[-2])
    spread = max(k_acc) - min(k_acc)
    ok = rises and bounded and spread < 2.0
    curve = ", ".join(f"{n}:{a:.2f}" for n, a in zip(ns, n_acc))
    kcurve = ", ".join(f"{k}:{a:.2f}" for k, a in zip(ks, k_acc))
    assert report(8, ok, f"n sweep [{curve}] rises {rises}, bounded {bounded}; k sweep [{kcurve}] "
                         f"spread {spread:.2f} (< 2)")


# ---------------------------------------------------------------- 9


def test_criterion_9_statistics(report, bench):
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(20):
        accs = rng.uniform(0, 1, int(rng.integers(2, 600)))
        worst = max(worst, abs(ci95(accs) - ci95_reference(accs)))
    for rep in accuracies(bench.get("table", [])).values():
        worst = max(worst, abs(rep.ci95_halfwidth - ci95_reference(rep.per_episode)))
    test = bench["test"]
    chance = []
    for way in (5, "all"):
        # fresh features per episode keep the episodes independent draws
        per = [evaluate(None, None, [ep], None, dataset=test,
                        features=rng.standard_normal((len(test), 64))).per_episode[0]
               for ep in sample_episodes(test.fine, way, 1, 15, 1000, 3)]
        rep = EvalReport.from_accuracies(per)
        w = test.hierarchy.fine_count if way == "all" else way
        chance.append((w, rep.mean_accuracy, rep.ci95_halfwidth,
                       abs(rep.mean_accuracy - 1 / w) <= 3 * rep.ci95_halfwidth))
    ok = worst <= 1e-10 and all(c[-1] for c in chance)
    detail = "; ".join(f"{w}-way random {m:.4f} vs {1 / w:.4f} (3 CI {3 * c:.4f})" for w, m, c, _ in chance)
    assert report(9, ok, f"CI recompute max diff {worst:.1e} (<= 1e-10); {detail}")
