"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The lines are printed as they are produced (visible with ``-s``) and
repeated in the terminal summary.  Criteria 6, 7, 8 and 10 train full
models and take several minutes in total on one core.
"""

import csv
import json
import math
import time

import numpy as np
import pytest

from helpers import (brute_log_likelihood, brute_marginals, central_diff, enumerate_paths,
                     rel_err, trapezoid)
from sahmmvae import cli
from sahmmvae import diffcore as dc
from sahmmvae import hmmprior as hp
from sahmmvae import vaemodel as vm
from sahmmvae.flows import FlowParams, flow_forward, flow_inverse_with_logdet, tau_from_delta

RESULTS: dict = {}
EPOCHS = 3000
T_EPISODE = 1000


def record(n, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


def randomized_prior(branch, n, K, rng, layers=1):
    prior = hp.HmmPriorParams.initialize(branch, n, K, rng, flow_layers=layers)
    for t in prior.tensors.values():
        t.value = t.value + rng.normal(0.0, 0.5, t.shape)
    return prior


def read_metrics(outdir):
    with open(outdir / "metrics.csv", newline="") as fh:
        return {(r["scope"], r["metric"]): r["value"] for r in csv.DictReader(fh)}


# ------------------------------------------------------------ 1


def test_01_hmm_oracle_equivalence():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst_ll = worst_vit = worst_fb = 0.0
    for branch in (1, 2, 3):
        for _ in range(50):
            T, K = int(rng.integers(1, 7)), int(rng.integers(1, 4))
            prior = randomized_prior(branch, 1, K, rng)
            S = rng.normal(0.0, 1.5, size=(T, 1))
            local = prior.local_scores(S).value[:, 0, :]
            init = prior.tensors["init_logits"].value[0]
            trans = prior.tensors["trans_logits"].value[0]
            worst_ll = max(worst_ll, abs(prior.log_prob(S).item() - brute_log_likelihood(local, init, trans)))
            best = max(s for _, s in enumerate_paths(local, init, trans))
            path = prior.viterbi_paths(S)[:, 0]
            worst_vit = max(worst_vit, abs(hp.path_log_score(path, local, init, trans) - best))
            marg = hp.forward_backward(local, init, trans)
            worst_fb = max(worst_fb, np.max(np.abs(marg - brute_marginals(local, init, trans))))
    elapsed = time.perf_counter() - start
    ok = worst_ll < 1e-9 and worst_vit < 1e-9 and worst_fb < 1e-10 and elapsed < 10
    record(1, ok, f"150 instances, max |loglik err| {worst_ll:.1e}, Viterbi score err {worst_vit:.1e}, "
                  f"marginal err {worst_fb:.1e}, {elapsed:.1f}s")


# ------------------------------------------------------------ 2


def test_02_gradient_fidelity():
    start = time.perf_counter()
    worst = {}
    rng = np.random.default_rng(7)
    for branch in (1, 2, 3):
        cfg = vm.TrainConfig(branch=branch, K=2, seed=branch, flow_layers=2 if branch == 3 else 1)
        model = vm.build_model(2, 2, cfg)
        for t in model.prior.tensors.values():
            t.value = t.value + rng.normal(0.0, 0.3, t.shape)
        model.log_post_var.value = rng.normal(-1.0, 0.3, 2)
        Y = rng.normal(size=(8, 2))
        eps = vm.step_noise(branch, 0, (8, 2))
        with dc.recording() as tape:
            loss, _ = vm.total_loss(model, Y, 0.5, eps)
        tape.backward(loss)
        f = lambda: vm.total_loss(model, Y, 0.5, eps)[0].item()
        for name, p in model.parameters().items():
            group = name.split(".")[0] if not name.startswith("prior.") else name
            err = rel_err(p.grad, central_diff(f, p.value, h=1e-6))
            worst[(branch, group)] = max(worst.get((branch, group), 0.0), err)
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    record(2, ok, f"{len(worst)} (branch, group) pairs, max rel err {worst[top]:.1e} "
                  f"(branch {top[0]} {top[1]}), {elapsed:.1f}s")


# ------------------------------------------------------------ 3


def _one_step_density(branch, rng, grid):
    N = grid.size
    S = np.stack([np.full(N, rng.uniform(-3, 3)), grid])
    col = lambda v: np.full((N, 1), v)
    if branch == 1:
        out = hp.branch1_scores(S, col(rng.uniform(-3, 3)), col(math.log(rng.uniform(0.05, 4.0))))
    elif branch == 2:
        out = hp.branch2_scores(S, col(0.0), col(0.0), col(rng.uniform(-3, 3)),
                                col(rng.uniform(-0.95, 0.95)), col(math.log(rng.uniform(0.05, 4.0))))
    else:
        # single layer, |gamma| <= 0.5, 0.5 <= delta <= 1.4, 0.25 <= rho <= 1.2:
        # the range a 2001-point grid on [-30, 30] resolves (see flow tests)
        out = hp.branch3_scores(S, col(0.0), col(0.0), col(rng.uniform(-0.95, 0.95)),
                                col(math.log(rng.uniform(0.25, 1.2))),
                                np.full((1, N, 1), rng.uniform(-0.5, 0.5)),
                                np.full((1, N, 1), tau_from_delta(rng.uniform(0.5, 1.4))))
    return np.exp(out.value[1, :, 0])


def test_03_density_normalization():
    grid = np.linspace(-30, 30, 2001)
    rng = np.random.default_rng(33)
    worst = {b: max(abs(trapezoid(_one_step_density(b, rng, grid), grid) - 1.0) for _ in range(20))
             for b in (1, 2, 3)}
    ok = max(worst.values()) < 1e-6
    record(3, ok, "max |integral - 1| per branch: " + ", ".join(f"{b}: {w:.1e}" for b, w in worst.items()))


# ------------------------------------------------------------ 4


def test_04_flow_correctness():
    rng = np.random.default_rng(44)
    u = np.linspace(-50, 50, 4001)
    worst_rt = worst_jac = 0.0
    for _ in range(30):
        L = int(rng.integers(1, 4))
        p = FlowParams.from_delta(rng.uniform(-1.5, 1.5, L), rng.uniform(0.4, 2.5, L))
        eps, ld = flow_inverse_with_logdet(p, u)
        worst_rt = max(worst_rt, np.max(np.abs(flow_forward(p, eps) - u)))
        x = rng.uniform(-5, 5, 25)
        h = 1e-6
        fd = (flow_inverse_with_logdet(p, x + h)[0] - flow_inverse_with_logdet(p, x - h)[0]) / (2 * h)
        worst_jac = max(worst_jac, np.max(np.abs(np.exp(flow_inverse_with_logdet(p, x)[1]) / fd - 1)))
    ok = worst_rt < 1e-10 and worst_jac < 1e-6
    record(4, ok, f"round-trip max err {worst_rt:.1e} on [-50, 50], "
                  f"log-Jacobian vs finite differences rel err {worst_jac:.1e}")


# ------------------------------------------------------------ 5


def test_05_branch_nesting():
    rng = np.random.default_rng(55)
    worst2 = worst3 = 0.0
    for _ in range(20):
        n, K, T = 2, int(rng.integers(1, 4)), 12
        S = rng.normal(0, 2, size=(T, n))
        mu, lv = rng.normal(size=(n, K)), rng.normal(size=(n, K))
        b1 = hp.branch1_scores(S, mu, lv).value
        b2 = hp.branch2_scores(S, rng.normal(size=(n, K)), rng.normal(size=(n, K)), mu,
                               np.zeros((n, K)), lv).value
        worst2 = max(worst2, np.max(np.abs(b2[1:] - b1[1:])))
        ls = rng.normal(0, 0.5, size=(n, K))
        L = int(rng.integers(1, 3))
        b3 = hp.branch3_scores(S, rng.normal(size=(n, K)), rng.normal(size=(n, K)), np.zeros((n, K)), ls,
                               np.zeros((L, n, K)), np.full((L, n, K), tau_from_delta(1.0))).value
        b1z = hp.branch1_scores(S, np.zeros((n, K)), 2 * ls).value
        worst3 = max(worst3, np.max(np.abs(b3[1:] - b1z[1:])))
    ok = worst2 < 1e-12 and worst3 < 1e-10
    record(5, ok, f"Branch II (phi=0) vs I: {worst2:.1e}; Branch III (identity flow, a=0) vs zero-mean I: {worst3:.1e}")


# ------------------------------------------------------------ 9


def test_09_source_isolation():
    rng = np.random.default_rng(99)
    leaks, changed = 0, 0
    checks = 0
    for branch in (1, 2, 3):
        prior = randomized_prior(branch, 3, 3, rng, layers=2)
        S = rng.normal(size=(15, 3))
        base = prior.log_prob_per_source(S).value.copy()
        for j in range(3):
            with dc.recording() as tape:
                out = prior.log_prob_per_source(S)[j]
            tape.backward(out)
            for name, t in prior.tensors.items():
                axis = 1 if name.startswith("flow_") else 0
                leaks += int(np.count_nonzero(np.delete(t.grad, j, axis=axis)))
                t.zero_grad()
            saved = {k: t.value.copy() for k, t in prior.tensors.items()}
            for name, t in prior.tensors.items():
                idx = (slice(None), j) if name.startswith("flow_") else (j,)
                t.value[idx] += rng.normal(0, 0.3, t.value[idx].shape)
            moved = prior.log_prob_per_source(S).value
            changed += int(np.count_nonzero(np.delete(moved, j) != np.delete(base, j)))
            checks += 1
            assert moved[j] != base[j]
            for k, t in prior.tensors.items():
                t.value = saved[k]
    ok = leaks == 0 and changed == 0
    record(9, ok, f"{checks} (branch, source) perturbations: {leaks} nonzero cross-source gradient "
                  f"entries, {changed} other-source log-densities changed")


# ------------------------------------------------------------ end-to-end runs


def _run(tmp, name, scenario, branch):
    cfg = tmp / f"{name}.json"
    cfg.write_text(json.dumps({
        "episode": {"scenario": scenario, "T": T_EPISODE, "seed": 0},
        "model": {"branch": branch, "epochs": EPOCHS, "seed": 0, "log_every": 10},
    }))
    out = tmp / name
    start = time.perf_counter()
    status = cli.run_experiment(cfg, out=out, plots_enabled=True)
    return {"status": status, "out": out, "seconds": time.perf_counter() - start, "config": cfg}


@pytest.fixture(scope="module")
def default_runs(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("default")
    return {b: _run(tmp, f"branch{b}", "default", b) for b in (1, 2, 3)}


@pytest.fixture(scope="module")
def msar_runs(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("msar")
    return {b: _run(tmp, f"branch{b}", "msar", b) for b in (2, 3)}


def test_06_end_to_end_separation(default_runs):
    parts, ok = [], True
    for b, run in default_runs.items():
        m = read_metrics(run["out"]) if run["status"] == 0 else {}
        corr = float(m.get(("all", "mean_abs_corr"), "nan"))
        lead = float(m.get(("all", "loss_leading_mean"), "nan"))
        trail = float(m.get(("all", "loss_trailing_mean"), "nan"))
        ok &= run["status"] == 0 and corr >= 0.95 and trail < lead and run["seconds"] < 600
        parts.append(f"B{b} |corr| {corr:.4f}, loss {lead:.1f} -> {trail:.1f}, {run['seconds']:.0f}s")
    record(6, ok, "; ".join(parts))


def test_07_regime_structure(default_runs):
    parts, ok = [], True
    for b in (1, 2):
        m = read_metrics(default_runs[b]["out"])
        dd = [m[(f"source_{j}", "learned_diag_dominant")] == "1" for j in (1, 2)]
        tv = float(m[("all", "mean_tv")])
        ok &= all(dd) and tv < 0.15
        parts.append(f"B{b} diagonal-dominant {dd}, mean TV {tv:.3f}")
    record(7, ok, "; ".join(parts))


def test_08_state_recovery(msar_runs):
    acc = {}
    for b, run in msar_runs.items():
        assert run["status"] == 0
        m = read_metrics(run["out"])
        acc[b] = [float(m[(f"source_{j}", "state_accuracy")]) for j in (1, 2)]
    ok = min(acc[2]) >= 0.8
    record(8, ok, f"MSAR episode, Branch II accuracy {acc[2]} (threshold 0.8); "
                  f"Branch III accuracy {acc[3]} (reported only)")


def test_10_determinism(default_runs, tmp_path):
    first = default_runs[1]
    again = tmp_path / "again"
    status = cli.run_experiment(first["config"], out=again, plots_enabled=True)
    names = ["loss.csv", "sources.csv", "states.csv", "transitions.csv", "metrics.csv"]
    same = [(first["out"] / n).read_bytes() == (again / n).read_bytes() for n in names]
    ok = status == 0 and all(same)
    record(10, ok, f"Branch I rerun, {sum(same)}/{len(names)} CSV files byte-identical")


def test_posterior_variance_shrinks(default_runs):
    """Posterior spread relative to the latent scale falls by 10x or more.

    The raw variance is not identifiable (latents can be rescaled and the
    decoder and prior absorb the factor), so the ratio is taken against the
    spread of the posterior means.
    """
    m = read_metrics(default_runs[1]["out"])
    model0 = vm.build_model(2, 2, vm.TrainConfig(branch=1, epochs=EPOCHS))
    from sahmmvae.synthgen import default_scenario, make_episode
    specs, mixing = default_scenario()
    mu0 = model0.posterior_means(make_episode(specs, mixing, T_EPISODE, seed=0).observations)
    init_ratio = model0.posterior_variances() / mu0.var(axis=0)
    final_ratio = np.array([float(m[(f"source_{j}", "post_var")]) / float(m[(f"source_{j}", "latent_var")])
                            for j in (1, 2)])
    print(f"relative posterior variance {init_ratio} -> {final_ratio}")
    assert init_ratio.min() / final_ratio.max() >= 10
