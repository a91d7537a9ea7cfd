"""Covariance matrix adaptation evolution strategy and a counting query oracle."""

from __future__ import annotations

import math
import threading

import numpy as np


class CMAES:
    """(mu/mu_w, lambda)-CMA-ES with rank-one and rank-mu covariance updates.

    Usage is ask/tell: ``ask()`` returns ``popsize`` candidates as rows,
    ``tell(candidates, fitness)`` updates the search distribution from
    their ranks (lower fitness is better).
    """

    def __init__(self, mean, sigma: float, popsize: int | None = None, seed=None):
        self.mean = np.asarray(mean, dtype=np.float64).ravel().copy()
        n = self.dim = self.mean.size
        if sigma <= 0:
            raise ValueError("initial step size must be positive")
        self.sigma = float(sigma)
        self.popsize = popsize or 4 + int(3 * math.log(n))
        self.mu = self.popsize // 2
        wts = math.log(self.mu + 0.5) - np.log(np.arange(1, self.mu + 1))
        self.weights = wts / wts.sum()
        self.mueff = 1.0 / (self.weights ** 2).sum()
        self.cc = (4 + self.mueff / n) / (n + 4 + 2 * self.mueff / n)
        self.cs = (self.mueff + 2) / (n + self.mueff + 5)
        self.c1 = 2 / ((n + 1.3) ** 2 + self.mueff)
        self.cmu = min(1 - self.c1, 2 * (self.mueff - 2 + 1 / self.mueff) / ((n + 2) ** 2 + self.mueff))
        self.damps = 1 + 2 * max(0.0, math.sqrt((self.mueff - 1) / (n + 1)) - 1) + self.cs
        self.chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))
        self.pc = np.zeros(n)
        self.ps = np.zeros(n)
        self.B = np.eye(n)
        self.D = np.ones(n)
        self.C = np.eye(n)
        self.generation = 0
        self.evaluations = 0
        self.rng = np.random.default_rng(seed)
        self.best_x = self.mean.copy()
        self.best_f = math.inf

    def ask(self) -> np.ndarray:
        z = self.rng.standard_normal((self.popsize, self.dim))
        return self.mean + self.sigma * (z * self.D) @ self.B.T

    def tell(self, candidates: np.ndarray, fitness) -> None:
        candidates = np.asarray(candidates, dtype=np.float64)
        fitness = np.asarray(fitness, dtype=np.float64)
        if candidates.shape != (self.popsize, self.dim) or fitness.shape != (self.popsize,):
            raise ValueError("tell expects one fitness per asked candidate")
        self.evaluations += self.popsize
        order = np.argsort(fitness, kind="stable")
        if fitness[order[0]] < self.best_f:
            self.best_f = float(fitness[order[0]])
            self.best_x = candidates[order[0]].copy()
        n = self.dim
        y = (candidates[order[:self.mu]] - self.mean) / self.sigma
        y_mean = self.weights @ y
        self.mean = self.mean + self.sigma * y_mean
        self.generation += 1
        # C^{-1/2} y_mean through the eigenbasis
        inv_sqrt = self.B @ ((self.B.T @ y_mean) / self.D)
        self.ps = (1 - self.cs) * self.ps + math.sqrt(self.cs * (2 - self.cs) * self.mueff) * inv_sqrt
        ps_norm = np.linalg.norm(self.ps)
        hsig = ps_norm / math.sqrt(1 - (1 - self.cs) ** (2 * self.generation)) / self.chi_n < 1.4 + 2 / (n + 1)
        self.pc = (1 - self.cc) * self.pc + hsig * math.sqrt(self.cc * (2 - self.cc) * self.mueff) * y_mean
        rank_mu = (y.T * self.weights) @ y
        self.C = ((1 - self.c1 - self.cmu) * self.C
                  + self.c1 * (np.outer(self.pc, self.pc) + (1 - hsig) * self.cc * (2 - self.cc) * self.C)
                  + self.cmu * rank_mu)
        self.sigma *= math.exp((self.cs / self.damps) * (ps_norm / self.chi_n - 1))
        self.C = np.triu(self.C) + np.triu(self.C, 1).T
        d2, self.B = np.linalg.eigh(self.C)
        self.D = np.sqrt(np.maximum(d2, 1e-30))


def cma_minimize(f, x0, sigma: float, max_evals: int = 5000, target: float = -math.inf,
                 popsize: int | None = None, seed=None):
    """Minimize ``f`` (rows -> values) until the budget or ``target`` is reached.

    Returns ``(best_x, best_f, evaluations)``.
    """
    es = CMAES(x0, sigma, popsize, seed)
    while es.evaluations + es.popsize <= max_evals and es.best_f > target:
        xs = es.ask()
        es.tell(xs, f(xs))
        if es.sigma * np.max(es.D) < 1e-14:
            break
    return es.best_x, es.best_f, es.evaluations


class QueryBudgetExceeded(RuntimeError):
    pass


class OracleFailure(RuntimeError):
    pass


class QueryOracle:
    """Counts queries to a black-box ``x -> h`` function and enforces a budget.

    Each image in a batch counts as one query. Calls are serialized, so one
    oracle can be shared between threads.
    """

    def __init__(self, fn, budget: int | None = None):
        self.fn = fn
        self.budget = budget
        self.queries = 0
        self._lock = threading.Lock()

    @property
    def remaining(self) -> float:
        return math.inf if self.budget is None else self.budget - self.queries

    def __call__(self, x: np.ndarray) -> np.ndarray:
        with self._lock:
            n = len(x)
            if self.budget is not None and self.queries + n > self.budget:
                raise QueryBudgetExceeded(f"query budget {self.budget} exhausted")
            self.queries += n
            try:
                h = self.fn(x)
            except Exception as exc:  # surfaced as a typed failure
                raise OracleFailure(str(exc)) from exc
        if not np.all(np.isfinite(h)):
            raise OracleFailure("oracle returned non-finite values")
        return h
