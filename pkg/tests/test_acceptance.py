"""Acceptance criteria. Each test prints one ``ACCEPTANCE <n> ...: PASS|FAIL`` line."""

import itertools
import math
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import t as t_dist
from sklearn.covariance import graphical_lasso

from halide.bench import run_bench
from halide.cli import main
from halide.dataset import center_states
from halide.evaluation import compute_metrics, friedman_conover
from halide.pipeline import RunConfig, halide_fit
from halide.policy import (EMConfig, EnergyPolicy, MixtureState, SubtrajData, e_step, em_edm_fit,
                           loss_gradient, weighted_loss)
from halide.ranking import rank_dataset
from halide.segmentation import (assignment_cost, cut_subtrajectories, dp_assign, rmt_ticc_fit,
                                 toeplitz_glasso, toeplitz_violation)
from halide.segmentation.toeplitz import glasso_objective
from halide.synthetic import GeneratorSpec, default_benchmark, generate, score_recovery
from conftest import record_acceptance

pytestmark = pytest.mark.acceptance

SEEDS = range(10)


def _verdict(n, name, ok, detail, elapsed):
    record_acceptance(f"ACCEPTANCE {n} {name}: {'PASS' if ok else 'FAIL'} ({detail}; {elapsed:.1f}s)")


# ------------------------------------------------------------------ 1


def test_reduction_equivalence():
    t0 = time.time()
    d, _ = generate(GeneratorSpec(N=12, T_min=40, T_max=60, seed=21))
    cfg = RunConfig(K=2, weight_axis="uniform", seed=21,
                    em={"m_steps": 50, "max_em_iter": 10, "em_restarts": 2}, seg={"max_ticc_iter": 10})
    uni = halide_fit(d, rank_dataset(d), cfg)
    byp = halide_fit(d, None, replace(cfg, weight_axis="ranked"))  # data weights are all 1
    same = all(np.array_equal(a.params, b.params) for a, b in zip(uni.mixture.policies, byp.mixture.policies))
    same = same and np.array_equal(uni.mixture.priors, byp.mixture.priors)
    same = same and np.array_equal(uni.regulator.reward, byp.regulator.reward)
    el = time.time() - t0
    ok = same and el < 60
    _verdict(1, "reduction equivalence", ok, f"bit-identical={same}", el)
    assert ok


# ------------------------------------------------------------------ 2


def test_dp_optimality():
    t0 = time.time()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(200):
        T, Q = int(rng.integers(1, 9)), int(rng.integers(1, 4))
        nll = rng.normal(size=(T, Q)) * rng.uniform(0.5, 5)
        dt = np.r_[0.0, rng.exponential(3.0, T - 1)]
        r = rng.uniform(0, 1, T)
        beta, tau = float(rng.uniform(0, 6)), float(rng.uniform(0.3, 5))
        sign = float(rng.choice([1.0, -1.0]))
        best = min(assignment_cost(nll, lab, dt, r, beta, tau, sign)
                   for lab in itertools.product(range(Q), repeat=T))
        got = assignment_cost(nll, dp_assign(nll, dt, r, beta, tau, sign), dt, r, beta, tau, sign)
        worst = max(worst, abs(got - best))
    el = time.time() - t0
    ok = worst == 0.0 and el < 10
    _verdict(2, "DP optimality", ok, f"max |dp - enumeration| = {worst:.3g} over 200 instances", el)
    assert ok


# ------------------------------------------------------------------ 3


# on ill-conditioned draws the coordinate-descent reference can stall slightly above the ADMM optimum
@pytest.mark.filterwarnings("ignore::sklearn.exceptions.ConvergenceWarning")
def test_graphical_lasso_oracle():
    t0 = time.time()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        m = int(rng.integers(2, 5))
        X = rng.normal(size=(int(rng.integers(m + 2, 40)), m)) @ rng.normal(size=(m, m))
        S = np.cov(X, rowvar=False, bias=True) + 1e-3 * np.eye(m)
        lam = float(rng.uniform(0.01, 0.5))
        ours = toeplitz_glasso(S, lam, omega=1, tol=1e-9, max_iter=20000)
        _, ref = graphical_lasso(S, lam, mode="cd", tol=1e-10, max_iter=2000)
        f_ours, f_ref = glasso_objective(ours.theta, S, lam), glasso_objective(ref, S, lam)
        worst = max(worst, abs(f_ours - f_ref) / max(1.0, abs(f_ref)))
    viol = 0.0
    for _ in range(20):
        omega, m = int(rng.choice([2, 3])), int(rng.integers(1, 4))
        X = rng.normal(size=(60, m * omega))
        S = np.cov(X, rowvar=False, bias=True) + 1e-3 * np.eye(m * omega)
        model = toeplitz_glasso(S, float(rng.uniform(0.01, 0.3)), omega=omega)
        viol = max(viol, toeplitz_violation(model.theta, m, omega))
    el = time.time() - t0
    ok = worst <= 1e-4 and viol < 1e-8 and el < 60
    _verdict(3, "graphical-lasso oracle", ok, f"max rel objective gap {worst:.2e}, max Toeplitz violation {viol:.2e}", el)
    assert ok


# ------------------------------------------------------------------ 4


def test_gradient_checks():
    t0 = time.time()
    rng = np.random.default_rng(4)
    h = 1e-5
    worst = 0.0
    cases = list(itertools.product([1e-6, 0.5, 1.0], [0.0, 0.5], ["linear", "mlp"]))
    for i in range(100):
        w_level, lam, arch = cases[i % len(cases)]
        m, A, n = int(rng.integers(1, 5)), int(rng.integers(2, 5)), int(rng.integers(1, 8))
        pol = EnergyPolicy(m, A, arch, hidden=5)
        pol.params = rng.normal(size=pol.n_params)
        X, a = rng.normal(size=(n, m)), rng.integers(0, A, n)
        w = np.full(n, w_level) * rng.uniform(0.9, 1.0, n)
        u = float(rng.uniform(0.1, 1.0))
        g = loss_gradient(pol, X, a, w, u, lam)
        fd = np.empty_like(g)
        for k in range(pol.n_params):
            p0 = pol.params[k]
            pol.params[k] = p0 + h
            up = weighted_loss(pol, X, a, w, u, lam)
            pol.params[k] = p0 - h
            dn = weighted_loss(pol, X, a, w, u, lam)
            pol.params[k] = p0
            fd[k] = (up - dn) / (2 * h)
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(g), np.linalg.norm(fd), 1e-300))
    el = time.time() - t0
    ok = worst < 1e-4 and el < 30
    _verdict(4, "gradient checks", ok, f"max relative error {worst:.2e} over 100 instances", el)
    assert ok


# ------------------------------------------------------------------ 5


def _hand_responsibilities(segs, policies, priors):
    out = []
    for s in segs:
        logs = []
        for pol, rho in zip(policies, priors):
            p = pol.unpack()
            total = math.log(rho)
            for x, a in zip(s.states, s.actions):
                f = [float(p["W"][b] @ x + p["b"][b]) for b in range(pol.A)]
                top = max(f)
                total += f[a] - (top + math.log(sum(math.exp(v - top) for v in f)))
            logs.append(total)
        top = max(logs)
        z = top + math.log(sum(math.exp(v - top) for v in logs))
        out.append([math.exp(v - z) for v in logs])
    return np.array(out)


def test_e_step_correctness():
    from halide.segmentation import SubTrajectory
    t0 = time.time()
    rng = np.random.default_rng(5)
    worst_hand = worst_sum = 0.0
    invariant = True
    for _ in range(20):
        m, A = int(rng.integers(1, 4)), int(rng.integers(2, 4))
        segs = []
        for i in range(int(rng.integers(1, 6))):
            n = int(rng.integers(1, 7))
            segs.append(SubTrajectory("s", 0, n, 0, rng.normal(size=(n, m)), rng.integers(0, A, n),
                                      rng.uniform(0.05, 1, n)))
        pols = []
        for _ in range(3):
            pol = EnergyPolicy(m, A)
            pol.params = rng.normal(scale=2.0, size=pol.n_params)
            pols.append(pol)
        priors = rng.dirichlet(np.ones(3))
        mix = MixtureState(pols, priors, np.zeros((0, 3)))
        u = e_step(SubtrajData.from_segments(segs), mix)
        worst_hand = max(worst_hand, float(np.max(np.abs(u - _hand_responsibilities(segs, pols, priors)))))
        worst_sum = max(worst_sum, float(np.max(np.abs(u.sum(axis=1) - 1))))
        segs2 = [replace(s, weights=rng.uniform(0.01, 1, len(s))) for s in segs]
        invariant = invariant and np.array_equal(u, e_step(SubtrajData.from_segments(segs2), mix))
    el = time.time() - t0
    ok = worst_hand <= 1e-10 and worst_sum <= 1e-10 and invariant and el < 5
    _verdict(5, "E-step correctness", ok,
             f"max |u - hand| {worst_hand:.1e}, max |row sum - 1| {worst_sum:.1e}, weight-invariant={invariant}", el)
    assert ok


# ------------------------------------------------------------------ 6 and 9


@pytest.fixture(scope="session")
def recovery_runs():
    """Segmentation then EM on the default benchmark for every seed (unit decision weights)."""
    runs = []
    for seed in SEEDS:
        t0 = time.time()
        d, truth = generate(default_benchmark(seed))
        eff = RunConfig(seed=seed).effective()
        dc, _ = center_states(d)
        seg = rmt_ticc_fit(dc, eff.seg)
        segs = [s for tr in dc for s in cut_subtrajectories(tr, seg.assignments[tr.id])]
        mix = em_edm_fit(segs, eff.em, d.state_dim, d.num_actions)
        labels = {tr.id: np.empty(len(tr), dtype=np.int64) for tr in dc}
        for s, o in zip(segs, mix.hard_labels):
            labels[s.owner][s.start:s.end] = o
        rep = score_recovery(truth, seg.assignments, labels)
        runs.append((seed, rep, mix, time.time() - t0))
    return runs


@pytest.mark.slow
def test_synthetic_recovery(recovery_runs):
    good = [r for r in recovery_runs if r[1].segmentation_accuracy >= 0.9 and r[1].policy_ari >= 0.8]
    slowest = max(r[3] for r in recovery_runs)
    per_seed = ", ".join(f"{s}:{r.segmentation_accuracy:.3f}/{r.policy_ari:.3f}" for s, r, _, _ in recovery_runs)
    ok = len(good) >= 8 and slowest < 300
    _verdict(6, "synthetic recovery", ok,
             f"{len(good)}/10 seeds meet acc>=0.9 and ARI>=0.8 [seed:acc/ARI {per_seed}]; slowest run {slowest:.0f}s",
             sum(r[3] for r in recovery_runs))
    assert ok


@pytest.mark.slow
def test_em_behavior(recovery_runs):
    t0 = time.time()
    histories = [h for _, _, mix, _ in recovery_runs for h in mix.restart_histories]
    # the small pipeline run of criterion 1 style adds weighted (non-unit) histories
    d, _ = generate(GeneratorSpec(N=12, T_min=40, T_max=60, seed=9))
    dc, _ = center_states(d)
    rk = {r.id: r.weight for r in rank_dataset(d)}
    seg = rmt_ticc_fit(dc, RunConfig(seed=9).effective().seg)
    segs = [replace(s, weights=np.full(len(s), rk[s.owner]))
            for tr in dc for s in cut_subtrajectories(tr, seg.assignments[tr.id])]
    for lam in (0.0, 0.5):
        mix = em_edm_fit(segs, EMConfig(lambda_edm=lam, seed=9), d.state_dim, d.num_actions)
        histories += mix.restart_histories
    max_rise = max((max(np.diff(h), default=0.0) for h in histories), default=0.0)
    final_ok = all(h[-1] <= h[0] for h in histories if h)
    ok = max_rise <= 1e-3 and final_ok
    _verdict(9, "EM behavior", ok,
             f"{len(histories)} EM runs, largest per-iteration increase {max(max_rise, 0.0):.2e}, final<=initial={final_ok}",
             time.time() - t0)
    assert ok


# ------------------------------------------------------------------ 7


@pytest.mark.slow
def test_quality_weighting_benefit(tmp_path):
    t0 = time.time()
    rows, full_grid_s = [], None
    for seed in SEEDS:
        d, _ = generate(default_benchmark(seed))
        s0 = time.time()
        methods = None if seed == 0 else ["HALIDE", "HALIDE_1", "EDM_W_EI"]
        rep = run_bench(d, RunConfig(seed=seed), tmp_path / f"s{seed}", methods=methods)
        if seed == 0:
            full_grid_s = time.time() - s0
        rows.append((seed, rep.mean["HALIDE"]["f1"], rep.mean["HALIDE_1"]["f1"], rep.mean["EDM_W_EI"]["f1"]))
    weighted = sum(h >= h1 for _, h, h1, _ in rows)
    hier = sum(h >= fl for _, h, _, fl in rows)
    detail = ", ".join(f"{s}:{h:.4f}/{h1:.4f}/{fl:.4f}" for s, h, h1, fl in rows)
    ok = weighted >= 8 and hier >= 8 and full_grid_s < 1800
    _verdict(7, "quality-weighting benefit", ok,
             f"HALIDE>=HALIDE_1 on {weighted}/10, HALIDE>=EDM_W_EI on {hier}/10 "
             f"[seed:F1 HALIDE/HALIDE_1/EDM_W_EI {detail}]; full 9-method grid {full_grid_s:.0f}s",
             time.time() - t0)
    assert ok


# ------------------------------------------------------------------ 8


def _brute_metrics(y, P):
    n, A = P.shape
    pred = [max(range(A), key=lambda k: (P[i, k], -k)) for i in range(n)]
    f1 = jac = rec = auc = apr = 0.0
    present = [k for k in range(A) if any(t == k for t in y)]
    for k in present:
        w = sum(t == k for t in y) / n
        tp = sum(1 for i in range(n) if y[i] == k and pred[i] == k)
        fp = sum(1 for i in range(n) if y[i] != k and pred[i] == k)
        fn = sum(1 for i in range(n) if y[i] == k and pred[i] != k)
        f1 += w * (2 * tp / (2 * tp + fp + fn))
        jac += w * (tp / (tp + fp + fn))
        rec += w * (tp / (tp + fn))
        pos = [P[i, k] for i in range(n) if y[i] == k]
        neg = [P[i, k] for i in range(n) if y[i] != k]
        if neg:
            auc += w * sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg) / (len(pos) * len(neg))
        prec_at = []
        for i in range(n):
            if y[i] == k:
                above = [j for j in range(n) if P[j, k] >= P[i, k]]
                prec_at.append(sum(y[j] == k for j in above) / len(above))
        apr += w * sum(prec_at) / len(prec_at)
    if len(present) < 2:
        auc = apr = math.nan
    acc = sum(p == t for p, t in zip(pred, y)) / n
    return acc, rec, f1, jac, auc, apr


def test_metric_oracles():
    t0 = time.time()
    rng = np.random.default_rng(8)
    worst, acc_rec = 0.0, 0.0
    for _ in range(100):
        n, A = int(rng.integers(4, 25)), int(rng.integers(2, 5))
        y = rng.integers(0, A, n)
        P = np.round(rng.dirichlet(np.ones(A), n), int(rng.integers(1, 4)))  # rounding creates ties
        P /= P.sum(axis=1, keepdims=True)
        m = compute_metrics(y, P)
        ref = _brute_metrics(list(y), P)
        got = (m.acc, m.rec, m.f1, m.jaccard, m.auc, m.apr)
        for g, r in zip(got, ref):
            if not (math.isnan(g) and math.isnan(r)):
                worst = max(worst, abs(g - r))
        acc_rec = max(acc_rec, abs(m.acc - m.rec))
    el = time.time() - t0
    ok = worst <= 1e-9 and acc_rec <= 1e-12 and el < 10
    _verdict(8, "metric oracles", ok, f"max |metric - brute force| {worst:.1e}, max |Acc - Rec| {acc_rec:.1e}", el)
    assert ok


# ------------------------------------------------------------------ 10


def _reference_friedman(X, alpha):
    k, n = len(X), len(X[0])
    ranks = [[0.0] * n for _ in range(k)]
    for j in range(n):
        col = [X[i][j] for i in range(k)]
        for i in range(k):
            higher = sum(1 for v in col if v > col[i])
            equal = sum(1 for v in col if v == col[i])
            ranks[i][j] = higher + (equal + 1) / 2.0
    R = [sum(r) for r in ranks]
    A1 = sum(v * v for r in ranks for v in r)
    C1 = n * k * (k + 1) ** 2 / 4.0
    T1 = (k - 1) * sum((Ri - n * (k + 1) / 2.0) ** 2 for Ri in R) / (A1 - C1)
    from scipy.stats import chi2
    p = chi2.sf(T1, k - 1)
    pairs = [(i, j) for i in range(k) for j in range(i + 1, k)]
    decisions = {pair: False for pair in pairs}
    if p < alpha:
        df = (n - 1) * (k - 1)
        se = math.sqrt(2 * (n * A1 - sum(Ri * Ri for Ri in R)) / df)
        raw = {(i, j): 2 * t_dist.sf(abs(R[i] - R[j]) / se, df) for i, j in pairs}
        # Holm: walk up the sorted p-values, stop at the first acceptance
        for step, pair in enumerate(sorted(pairs, key=lambda q: raw[q])):
            if raw[pair] * (len(pairs) - step) < alpha:
                decisions[pair] = True
            else:
                break
    return T1, p, decisions


def test_statistics():
    t0 = time.time()
    X = [[0.78, 0.80, 0.79, 0.81, 0.77, 0.80],
         [0.75, 0.74, 0.76, 0.75, 0.73, 0.76],
         [0.72, 0.69, 0.70, 0.71, 0.72, 0.68],
         [0.70, 0.71, 0.71, 0.71, 0.69, 0.70]]
    res = friedman_conover(np.array(X), ["A", "B", "C", "D"], alpha=0.05)
    T1, p, dec = _reference_friedman(X, 0.05)
    stat_gap = max(abs(res.statistic - T1), abs(res.p_value - p))
    same = all(bool(res.reject[i, j]) == d for (i, j), d in dec.items())
    flat = friedman_conover(np.full((4, 6), 0.5))
    el = time.time() - t0
    ok = stat_gap <= 1e-6 and same and 0 < sum(dec.values()) < 6 and not flat.significant and el < 5
    _verdict(10, "statistics", ok,
             f"|T1 - ref| and |p - ref| <= {stat_gap:.1e}, {sum(dec.values())}/6 rejections agree={same}, "
             f"all-equal table rejections={int(flat.reject.sum())}", el)
    assert ok


# ------------------------------------------------------------------ 11


@pytest.mark.slow
def test_determinism(tmp_path):
    import json
    t0 = time.time()
    (tmp_path / "spec.json").write_text(json.dumps({"N": 12, "T_min": 30, "T_max": 40, "seed": 11,
                                                    "cohorts": ["S21", "F21", "S22"]}))
    (tmp_path / "cfg.json").write_text(json.dumps({
        "K": 2, "seg": {"max_ticc_iter": 6},
        "em": {"m_steps": 30, "max_em_iter": 6, "em_restarts": 2, "init_restarts": 2}, "irl_steps": 60}))
    assert main(["synth", "--spec", str(tmp_path / "spec.json"), "--out", str(tmp_path / "d.jsonl")]) == 0
    outs = {}
    for threads in (1, 4):
        out = tmp_path / f"t{threads}"
        code = main(["bench", "--data", str(tmp_path / "d.jsonl"), "--config", str(tmp_path / "cfg.json"),
                     "--seed", "5", "--threads", str(threads), "--outdir", str(out)])
        assert code == 0
        outs[threads] = {p.relative_to(out).as_posix(): p.read_bytes()
                         for p in sorted(out.rglob("*")) if p.is_file() and p.name != "manifest.json"}
    files = sorted(outs[1])
    same = files == sorted(outs[4]) and all(outs[1][f] == outs[4][f] for f in files)
    n_preds = sum(f.startswith("preds/") for f in files)
    el = time.time() - t0
    ok = same and n_preds == 18 and {"report.csv", "cd.csv", "cd_jaccard.csv"} <= set(files)
    _verdict(11, "determinism", ok, f"{len(files)} files ({n_preds} prediction files) byte-identical={same}", el)
    assert ok
