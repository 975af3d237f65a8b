"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The desk-scale runs (criteria 5 to 9) share one configuration file,
``configs/desk.txt``, and seeds 0, 1, 2.  Simulations are cached per
(method, k, neighbour mode, noise range, seed) so criteria reuse each
other's runs; a criterion's runtime is the summed time of every run it
relies on, whether or not the run was cached.
"""

import math
import threading
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from fedrn import _backend
from fedrn.cli import load_spec, main
from fedrn.data import Dataset
from fedrn.federation import Server, build_data, run_simulation
from fedrn.gmm import fit_em
from fedrn.model import ModelParams, average_params, init_model, mean_cross_entropy_grad
from fedrn.reliability import expertise_scores, similarity_matrix, top_k_neighbors
from fedrn.selection import normalized_weights

ROOT = Path(__file__).resolve().parent.parent
DESK = ROOT / "configs" / "desk.txt"
SEEDS = (0, 1, 2)

RESULTS: list[str] = []


def verdict(n, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {title} | {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# ------------------------------------------------------------------ runs

_cache: dict = {}


def desk_cfg(method, k, mode="reliable", noise_hi=0.8, seed=0, **kw):
    sim = load_spec(DESK).sim
    return replace(sim, method=method, k=k, neighbor_mode=mode, master_seed=seed,
                   data=replace(sim.data, noise_hi=noise_hi), **kw)


def desk_run(method, k, mode="reliable", seed=0):
    key = (method, k, mode, 0.8, seed)
    if key not in _cache:
        t0 = time.perf_counter()
        res = run_simulation(desk_cfg(method, k, mode, seed=seed))
        after = [m for m in res.metrics if m.selection_active]
        lp = [m.lp_mean for m in after if m.lp_mean is not None]
        lr = [m.lr_mean for m in after if m.lr_mean is not None]
        _cache[key] = (dict(acc=res.final_test_accuracy,
                            lp=float(np.mean(lp)) if lp else math.nan,
                            lr=float(np.mean(lr)) if lr else math.nan),
                       time.perf_counter() - t0)
    return _cache[key]


def seed_mean(method, k, field="acc", mode="reliable"):
    vals, secs = [], 0.0
    for s in SEEDS:
        summary, t = desk_run(method, k, mode, s)
        vals.append(summary[field])
        secs += t
    return float(np.mean(vals)), secs


# ------------------------------------------------------------------ 1-4

def random_losses(rng):
    n = int(rng.integers(20, 400))
    if rng.random() < 0.5:
        k = int(rng.integers(1, n))
        a = rng.gamma(2.0, 0.1, size=k)
        b = rng.normal(rng.uniform(1, 4), rng.uniform(0.05, 1.0), size=n - k)
        return np.abs(np.r_[a, b])
    return rng.exponential(rng.uniform(0.01, 3.0), size=n)


def test_criterion_01_gmm_em_soundness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_drop, worst_sum = 0.0, 0.0
    for _ in range(100):
        x = random_losses(rng)
        g = fit_em(x)
        if len(g.log_likelihoods) > 1:
            worst_drop = max(worst_drop, float(-np.diff(g.log_likelihoods).min()))
        worst_sum = max(worst_sum, float(np.abs(g.posteriors(x, 0) + g.posteriors(x, 1) - 1).max()))
    jitter = np.random.default_rng(7).uniform(-1e-3, 1e-3, 100)
    fixture = np.r_[np.full(50, 0.1), np.full(50, 2.0)] + jitter
    g = fit_em(fixture)
    mean_err = max(abs(g.clean_mean - fixture[:50].mean()), abs(g.noisy_mean - fixture[50:].mean()))
    secs = time.perf_counter() - t0
    ok = worst_drop <= 1e-9 and worst_sum <= 1e-12 and mean_err < 0.05 and secs < 5
    verdict(1, "GMM-EM soundness", ok,
            f"max LL drop {worst_drop:.1e}, max |post sum - 1| {worst_sum:.1e}, "
            f"fixture mean error {mean_err:.4f}, {secs:.2f}s")


def ref_loss(flat, dims, X, y):
    pos, a = 0, X
    for l in range(len(dims) - 1):
        W = flat[pos:pos + dims[l] * dims[l + 1]].reshape(dims[l], dims[l + 1])
        pos += W.size
        b = flat[pos:pos + dims[l + 1]]
        pos += b.size
        z = a @ W + b
        a = np.maximum(z, 0) if l < len(dims) - 2 else z
    z = a - a.max(axis=1, keepdims=True)
    return -(z - np.log(np.exp(z).sum(axis=1, keepdims=True)))[np.arange(len(y)), y].mean()


def test_criterion_02_gradient_check():
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    worst = 0.0
    for i in range(20):
        d_in, c = int(rng.integers(2, 6)), int(rng.integers(2, 5))
        hidden = tuple(int(h) for h in rng.integers(2, 6, size=int(rng.integers(0, 3))))
        base = init_model(d_in, c, hidden, seed=i)
        m = ModelParams.from_flat(rng.normal(size=base.flat().size), base.dims)
        X = rng.normal(size=(int(rng.integers(1, 8)), d_in))
        y = rng.integers(0, c, size=X.shape[0])
        a = mean_cross_entropy_grad(m, X, y)
        f = np.zeros_like(a)
        h = 1e-6
        for j in range(a.size):
            up, dn = m.flat().copy(), m.flat().copy()
            up[j] += h
            dn[j] -= h
            f[j] = (ref_loss(up, m.dims, X, y) - ref_loss(dn, m.dims, X, y)) / (2 * h)
        worst = max(worst, float(np.linalg.norm(a - f) / max(np.linalg.norm(f), 1e-300)))
    secs = time.perf_counter() - t0
    verdict(2, "gradient check", worst <= 1e-4 and secs < 10,
            f"worst relative error {worst:.1e} over 20 MLPs ({_backend.kernels.NAME} kernels), {secs:.2f}s")


def test_criterion_03_aggregation_exactness():
    rng = np.random.default_rng(5)
    worst = 0.0
    for case in range(50):
        n_models = int(rng.integers(1, 6))
        hidden = tuple(int(h) for h in rng.integers(1, 6, size=int(rng.integers(0, 3))))
        models = [init_model(3, 4, hidden, seed=[case, j]) for j in range(n_models)]
        w = rng.random(n_models)
        w /= w.sum()
        out = average_params(models, w).flat()
        flats = [m.flat() for m in models]
        oracle = np.array([sum(w[j] * flats[j][i] for j in range(n_models)) for i in range(out.size)])
        worst = max(worst, float(np.abs(out - oracle).max()))
    m = init_model(4, 3, (5,), seed=1)
    same = average_params([m, m, m], [0.1, 0.7, 0.2])
    exact = same.flat().tobytes() == m.flat().tobytes()
    verdict(3, "aggregation exactness", worst <= 1e-12 and exact,
            f"max deviation from elementwise oracle {worst:.1e}, identical-model case exact={exact}")


def test_criterion_04_reliability_properties():
    rng = np.random.default_rng(11)
    asym, span_ok, wsum = 0.0, True, 0.0
    for _ in range(100):
        n, c = int(rng.integers(2, 15)), int(rng.integers(2, 10))
        z = rng.normal(size=(n, c)) * 3
        p = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        S = similarity_matrix(p)
        asym = max(asym, float(np.abs(S - S.T).max()))
        e = expertise_scores(rng.random(n))
        span_ok &= bool(e.min() == 0.0 and e.max() == 1.0)
        wsum = max(wsum, abs(float(normalized_weights(rng.random(int(rng.integers(1, 6))) + 1e-9).sum()) - 1))
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        ids = rng.permutation(50)[:n].tolist()
        scores = rng.integers(0, 5, size=n) / 4.0
        k = int(rng.integers(1, n + 1))
        oracle = [i for i, _ in sorted(zip(ids, scores), key=lambda t: (-t[1], t[0]))[:k]]
        mismatches += top_k_neighbors(99, ids, scores, k) != oracle
    ok = asym <= 1e-12 and span_ok and wsum <= 1e-12 and mismatches == 0
    verdict(4, "reliability properties", ok,
            f"max asymmetry {asym:.1e}, expertise spans [0,1]={span_ok}, max |sum R' - 1| {wsum:.1e}, "
            f"top-k mismatches {mismatches}/1000")


# ------------------------------------------------------------------ 5-9

def test_criterion_05_expertise_noise_correlation():
    t0 = time.perf_counter()
    cors = []
    for s in SEEDS:
        cfg = desk_cfg("fedrn", 2, noise_hi=0.4, seed=s)
        data = build_data(cfg)
        clean_rate = np.array([data.client(c).clean_mask().mean() for c in range(cfg.num_clients)])
        # accuracies the server holds immediately after the warm-up rounds
        res = run_simulation(replace(cfg, rounds=cfg.warmup, warmup_rounds=cfg.warmup), data=data)
        ids = sorted(res.state.accuracies)
        cors.append(float(np.corrcoef([res.state.accuracies[c] for c in ids], clean_rate[ids])[0, 1]))
    secs = time.perf_counter() - t0
    mean = float(np.mean(cors))
    verdict(5, "expertise-noise correlation", mean >= 0.8 and secs < 180,
            f"Pearson r per seed {np.round(cors, 3).tolist()}, mean {mean:.3f} (>= 0.8), {secs:.1f}s")


def test_criterion_06_selection_quality():
    lp2, t1 = seed_mean("fedrn", 2, "lp")
    lr2, _ = seed_mean("fedrn", 2, "lr")
    lp0, t2 = seed_mean("gmm", 0, "lp")
    lr0, _ = seed_mean("gmm", 0, "lr")
    secs = t1 + t2
    ok = lp2 - lp0 >= 0.03 and lr2 - lr0 >= 0.03 and secs < 600
    verdict(6, "selection quality", ok,
            f"LP {lp2:.3f} vs {lp0:.3f} (+{lp2 - lp0:.3f}), LR {lr2:.3f} vs {lr0:.3f} (+{lr2 - lr0:.3f}), "
            f"{secs:.0f}s")


def test_criterion_07_robustness_direction():
    runs = {name: seed_mean(m, k) for name, (m, k) in
            {"oracle": ("oracle", 0), "fedrn2": ("fedrn", 2), "fedrn1": ("fedrn", 1),
             "fedavg": ("fedavg", 0)}.items()}
    acc = {k: v[0] for k, v in runs.items()}
    secs = sum(v[1] for v in runs.values())
    ordered = acc["oracle"] >= acc["fedrn2"] >= acc["fedrn1"] >= acc["fedavg"]
    gap = acc["fedrn2"] - acc["fedavg"]
    verdict(7, "robustness direction", ordered and gap >= 0.05 and secs < 900,
            "oracle {oracle:.3f} >= FedRN(k=2) {fedrn2:.3f} >= FedRN(k=1) {fedrn1:.3f} >= FedAvg {fedavg:.3f}"
            .format(**acc) + f", k=2 minus FedAvg {100 * gap:.1f} points, {secs:.0f}s")


def test_criterion_08_k_saturation():
    a3, _ = seed_mean("fedrn", 3)
    a2, _ = seed_mean("fedrn", 2)
    verdict(8, "k-saturation", a3 - a2 <= 0.02,
            f"FedRN(k=3) {a3:.3f} minus FedRN(k=2) {a2:.3f} = {100 * (a3 - a2):.1f} points (<= 2)")


def test_criterion_09_reliable_beats_random():
    rel, _ = seed_mean("fedrn", 2)
    rnd, _ = seed_mean("fedrn", 2, mode="random")
    verdict(9, "reliable beats random", rel >= rnd,
            f"top-k {rel:.3f} vs random-k {rnd:.3f}")


# ------------------------------------------------------------------ 10-11

def test_criterion_10_determinism(tmp_path, monkeypatch):
    spec = tmp_path / "spec.txt"
    text = (DESK.read_text().replace("rounds = 60", "rounds = 15").replace("repeat = 3", "repeat = 2")
            .replace("data.per_class = 500", "data.per_class = 200"))
    spec.write_text(text)
    outs = []
    for label, threads in (("seq-a", "1"), ("seq-b", "1"), ("par", "4")):
        monkeypatch.setenv("FEDRN_THREADS", threads)
        assert main(["run", "--spec", str(spec), "--out", str(tmp_path / label)]) == 0
        outs.append(tmp_path / label)
    names = sorted(p.name for p in outs[0].iterdir() if p.suffix in (".csv", ".json"))
    same = all((o / n).read_bytes() == (outs[0] / n).read_bytes() for o in outs[1:] for n in names)
    verdict(10, "determinism", same and len(names) == 5,
            f"{len(names)} output files byte-identical across two sequential runs and a 4-thread run={same}")


def test_criterion_11_privacy_contract(monkeypatch):
    state = threading.local()
    touched, server_calls = [], []
    real_getattribute = Dataset.__getattribute__

    def guarded(self, name):
        if getattr(state, "server", False):
            touched.append(name)
        return real_getattribute(self, name)

    def instrument(method_name):
        real = getattr(Server, method_name)

        def wrapper(self, *a, **kw):
            server_calls.append(method_name)
            outer = getattr(state, "server", False)
            state.server = True
            try:
                return real(self, *a, **kw)
            finally:
                state.server = outer
        monkeypatch.setattr(Server, method_name, wrapper)

    monkeypatch.setattr(Dataset, "__getattribute__", guarded)
    for name in ("plan_neighbors", "aggregate", "neighbor_models", "reliability_table"):
        instrument(name)

    # positive control: a data access inside a flagged region is caught
    probe_ds = Dataset(np.zeros((2, 2)), [0, 1], [0, 1], 2)
    state.server = True
    probe_ds.features
    state.server = False
    caught = touched[:1] == ["features"]
    touched.clear()

    cfg = desk_cfg("fedrn", 2, seed=0, rounds=8, num_clients=6, participation_rate=0.5)
    run_simulation(cfg)
    phases = {n: server_calls.count(n) for n in ("plan_neighbors", "aggregate")}
    ok = caught and not touched and phases["plan_neighbors"] > 0 and phases["aggregate"] == 8
    verdict(11, "privacy contract", ok,
            f"instrumentation self-check={caught}, server calls {phases}, "
            f"dataset attribute reads during server code: {len(touched)}")
