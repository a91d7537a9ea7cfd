"""Query-only variant of progressive feature optimization, driven by CMA-ES."""

from __future__ import annotations

import time

import numpy as np

from splitlab import nn
from splitlab.attacks.cma import CMAES, QueryBudgetExceeded, QueryOracle
from splitlab.attacks.common import AttackConfig, AttackResult, per_target_mse, project_l1_ball_rows, read_only
from splitlab.attacks.pfo import stage_radii


def _rms(a):
    return float(np.sqrt(np.mean(np.square(a, dtype=np.float64)))) or 1.0


def code_basis(seed: int, stage: int, n_out: int, code_dim: int) -> np.ndarray:
    """Fixed random linear map from a code vector to a flattened hf perturbation."""
    rng = np.random.default_rng([seed, 7919, stage])
    return rng.standard_normal((n_out, code_dim)) / np.sqrt(code_dim)


class _Scorer:
    """Evaluates candidate images through the oracle, tracking the best match loss."""

    def __init__(self, oracle, h_tar, alpha):
        self.oracle, self.h_tar, self.alpha = oracle, h_tar, alpha
        self.best_loss = np.inf
        self.best_image = None
        self.best_state = None
        self.trace = []

    def __call__(self, x, states=None):
        h = self.oracle(x)
        match = per_target_mse(h, np.broadcast_to(self.h_tar, h.shape))
        i = int(np.argmin(match))
        if match[i] < self.best_loss:
            self.best_loss = float(match[i])
            self.best_image = x[i:i + 1].copy()
            self.best_state = None if states is None else tuple(s[i:i + 1].copy() for s in states)
        self.trace.append(self.best_loss)
        if self.alpha:
            return match + self.alpha * nn.total_variation(x)
        return match


def _single(h_tar):
    h_tar = np.asarray(h_tar)
    return h_tar if h_tar.ndim > 1 and h_tar.shape[0] == 1 else h_tar[None]


def _as_oracle(oracle, budget):
    return oracle if isinstance(oracle, QueryOracle) else QueryOracle(oracle, budget)


def _run_cma(es: CMAES, budget_left, evaluate):
    while es.popsize <= budget_left():
        xs = es.ask()
        es.tell(xs, evaluate(xs))


def attack_pfo_blackbox(h_tar, oracle, gen, cfg: AttackConfig | None = None) -> AttackResult:
    """Black-box PFO for one target representation.

    Initial selection scores ``cfg.candidates`` random latents; CMA-ES then
    searches w, and for each stage i a code c and a w offset, with
    ``hf_i = hf_i^0 + P_i c``. Every candidate is projected onto the stage's
    l1 balls before it is queried. The query budget is split evenly across
    the w phase and the H stages; on exhaustion the best-so-far is returned
    with ``budget_exhausted`` set.
    """
    cfg = cfg or AttackConfig(mode="blackbox")
    t0 = time.perf_counter()
    h_tar = _single(h_tar)
    oracle = _as_oracle(oracle, cfg.query_budget)
    start = oracle.queries
    budget = cfg.query_budget if oracle.budget is None else min(cfg.query_budget, oracle.budget - start)
    used = lambda: oracle.queries - start  # noqa: E731
    score = _Scorer(oracle, h_tar, cfg.tv_weight("gan", 3 * gen.size * gen.size))
    rng = np.random.default_rng(cfg.seed)
    dtype = h_tar.dtype
    exhausted = False
    phase_traces = {}
    with read_only(gen):
        try:
            k = min(cfg.candidates, budget)
            z = rng.standard_normal((k, gen.z_dim)).astype(dtype)
            ws = gen.map(z)
            score(gen.synthesize(ws), states=(ws,))
            phase_traces["select"] = list(score.trace)
            w_best = score.best_state[0]
            per_phase = (budget - used()) // (gen.depth + 1)

            # phase 0: w only
            scale_w = _rms(w_best)
            es = CMAES(np.zeros(gen.w_dim), cfg.sigma_w, cfg.popsize, seed=rng.integers(2**32))
            phase_end = used() + per_phase

            def eval_w(v):
                w = (w_best + scale_w * v).astype(dtype)
                return score(gen.synthesize(w), states=(w,))

            n0 = len(score.trace)
            _run_cma(es, lambda: phase_end - used(), eval_w)
            phase_traces["w"] = score.trace[n0:]
            w_best = score.best_state[0]

            hf_best = None
            for stage in range(1, gen.depth + 1):
                hf0 = gen.block_forward(stage, hf_best, w_best)[0]
                w0 = w_best
                r_hf, r_w = stage_radii(cfg, stage, gen.depth, hf0, w0)
                basis = code_basis(cfg.seed, stage, hf0.size, cfg.code_dim).astype(dtype) * _rms(hf0)
                scale_w = _rms(w0)
                es = CMAES(np.zeros(cfg.code_dim + gen.w_dim), cfg.sigma_code, cfg.popsize,
                           seed=rng.integers(2**32))
                phase_end = used() + per_phase if stage < gen.depth else budget

                def eval_stage(v, stage=stage, hf0=hf0, w0=w0, r_hf=r_hf, r_w=r_w, basis=basis, scale_w=scale_w):
                    n = len(v)
                    code, dw = v[:, :cfg.code_dim], v[:, cfg.code_dim:]
                    hf = hf0 + (code @ basis.T).astype(dtype).reshape(n, *hf0.shape[1:])
                    w = (w0 + scale_w * dw).astype(dtype)
                    hf = project_l1_ball_rows(hf, np.broadcast_to(hf0, hf.shape), np.repeat(r_hf, n))
                    w = project_l1_ball_rows(w, np.broadcast_to(w0, w.shape), np.repeat(r_w, n))
                    return score(gen.synthesize_from(stage, hf, w), states=(w, hf))

                # the stage centre reproduces the previous best image, so the
                # best-so-far state carries over only if this stage improves it
                before = score.best_loss
                n0 = len(score.trace)
                _run_cma(es, lambda: phase_end - used(), eval_stage)
                phase_traces[f"stage{stage}"] = score.trace[n0:]
                if score.best_loss < before:
                    w_best, hf_best = score.best_state
                else:
                    hf_best = hf0
        except QueryBudgetExceeded:
            exhausted = True
    # the oracle's own limit cut the requested budget short
    exhausted = exhausted or budget < cfg.query_budget
    traces = {k: np.asarray(v)[:, None] for k, v in phase_traces.items()}
    best = np.asarray(score.trace)[:, None]
    return AttackResult("pfo-blackbox", score.best_image, np.array([score.best_loss]), traces,
                        {"all": best}, time.perf_counter() - t0, cfg.echo(),
                        budget_exhausted=exhausted, queries=used())


def random_search(h_tar, oracle, gen, cfg: AttackConfig | None = None, batch: int = 32) -> AttackResult:
    """Equal-budget baseline: score random prior samples G(G_map(z)), keep the best."""
    cfg = cfg or AttackConfig(mode="blackbox")
    t0 = time.perf_counter()
    h_tar = _single(h_tar)
    oracle = _as_oracle(oracle, cfg.query_budget)
    start = oracle.queries
    score = _Scorer(oracle, h_tar, 0.0)
    rng = np.random.default_rng(cfg.seed)
    exhausted = False
    with read_only(gen):
        try:
            while (left := cfg.query_budget - (oracle.queries - start)) > 0:
                z = rng.standard_normal((min(batch, left), gen.z_dim)).astype(h_tar.dtype)
                score(gen.synthesize(gen.map(z)))
        except QueryBudgetExceeded:
            exhausted = True
    best = np.asarray(score.trace)[:, None]
    return AttackResult("random-search", score.best_image, np.array([score.best_loss]), {"all": best},
                        {"all": best}, time.perf_counter() - t0, cfg.echo(),
                        budget_exhausted=exhausted, queries=oracle.queries - start)
