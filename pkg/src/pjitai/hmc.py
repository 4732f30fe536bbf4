"""Hamiltonian Monte Carlo with all chains advanced together.

Chains are stacked along the first axis so that one call of the
log-density gradient serves every chain.  Each chain still owns its own
random stream and step size; the mass matrix is shared.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

LogpGrad = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]

MAX_ENERGY_ERROR = 1000.0


@dataclass
class HMCResult:
    draws: np.ndarray  # (chains, draws, dim)
    divergent: np.ndarray  # (chains, draws)
    step_size: np.ndarray  # (chains,)
    inv_mass: np.ndarray  # (dim,) or (dim, dim)
    accept_rate: np.ndarray  # (chains,)
    n_grad: int


class _DualAveraging:
    def __init__(self, eps0: np.ndarray, target: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.restart(eps0)

    def restart(self, eps0: np.ndarray):
        self.mu = np.log(10.0 * eps0)
        self.log_eps = np.log(eps0)
        self.log_eps_bar = np.zeros_like(eps0)
        self.h_bar = np.zeros_like(eps0)
        self.t = 0

    def update(self, accept_stat: np.ndarray):
        self.t += 1
        eta = 1.0 / (self.t + self.t0)
        self.h_bar = (1 - eta) * self.h_bar + eta * (self.target - accept_stat)
        self.log_eps = self.mu - np.sqrt(self.t) / self.gamma * self.h_bar
        w = self.t ** -self.kappa
        self.log_eps_bar = w * self.log_eps + (1 - w) * self.log_eps_bar

    @property
    def eps(self):
        return np.exp(self.log_eps)

    @property
    def final_eps(self):
        return np.exp(self.log_eps_bar)


def _windows(n_warmup: int) -> list[tuple[int, int]]:
    """Mass-matrix collection windows: [start, end) iteration ranges."""
    if n_warmup < 40:
        return []
    a = int(0.15 * n_warmup)
    b = int(0.4 * n_warmup)
    c = int(0.85 * n_warmup)
    return [(a, b), (b, c)]


def _estimate_metric(samples: np.ndarray, dense: bool) -> np.ndarray:
    """Inverse mass from pooled warmup samples (n, dim).

    Dense estimates shrink toward their diagonal; both are nudged away
    from zero as in Stan's regularization.
    """
    n, dim = samples.shape
    var = samples.var(axis=0, ddof=1)
    var = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
    if not dense:
        return var
    cov = np.cov(samples, rowvar=False).reshape(dim, dim)
    lam = n / (n + dim)
    cov = lam * cov + (1 - lam) * np.diag(np.diag(cov))
    cov = (n / (n + 5.0)) * cov
    cov[np.diag_indices(dim)] = var
    return cov


class _Metric:
    def __init__(self, inv_mass: np.ndarray):
        self.inv_mass = inv_mass
        self.dense = inv_mass.ndim == 2
        if self.dense:
            chol = np.linalg.cholesky(inv_mass)
            self.chol_inv = np.linalg.inv(chol)
        else:
            self.sd_inv = 1.0 / np.sqrt(inv_mass)

    def momentum(self, z: np.ndarray) -> np.ndarray:
        return z @ self.chol_inv if self.dense else z * self.sd_inv

    def velocity(self, p: np.ndarray) -> np.ndarray:
        return p @ self.inv_mass if self.dense else p * self.inv_mass

    def kinetic(self, p: np.ndarray) -> np.ndarray:
        return 0.5 * np.sum(p * self.velocity(p), axis=1)


def sample(
    logp_grad: LogpGrad,
    init: np.ndarray,
    rngs: Sequence[np.random.Generator],
    n_warmup: int = 1000,
    n_draws: int = 1000,
    target_accept: float = 0.8,
    trajectory_length: float = 1.5,
    max_leapfrog: int = 128,
    step_size: float = 0.2,
    dense: bool = True,
    init_inv_mass: np.ndarray | None = None,
) -> HMCResult:
    """Run all chains in lockstep.

    Each iteration draws a per-chain trajectory of ``ceil(L * U(0.5, 1.5) / eps)``
    leapfrog steps; chains that finish early are frozen while the rest
    continue.  The metric is estimated from warmup windows pooled across
    chains.
    """
    q = np.array(init, dtype=float)
    n_chains, dim = q.shape
    if len(rngs) != n_chains:
        raise ValueError("need one generator per chain")
    metric = _Metric(np.ones(dim) if init_inv_mass is None else np.array(init_inv_mass, dtype=float))
    da = _DualAveraging(np.full(n_chains, step_size), target_accept)
    eps = da.eps

    lp, grad = logp_grad(q)
    if not np.all(np.isfinite(lp)):
        raise FloatingPointError("log density is not finite at the initial point")
    n_grad = 1

    windows = _windows(n_warmup)
    window_buf: list[np.ndarray] = []
    draws = np.empty((n_chains, n_draws, dim))
    divergent = np.zeros((n_chains, n_draws), dtype=bool)
    accepted = np.zeros(n_chains)

    for it in range(n_warmup + n_draws):
        warm = it < n_warmup
        cur_eps = eps if warm else da.final_eps
        z = np.stack([g.standard_normal(dim) for g in rngs])
        u = np.array([g.random() for g in rngs])
        jitter = np.array([g.uniform(0.5, 1.5) for g in rngs])
        p = metric.momentum(z)
        n_steps = np.clip(np.ceil(trajectory_length * jitter / cur_eps), 1, max_leapfrog).astype(int)

        h0 = -lp + metric.kinetic(p)
        q_new, p_new, lp_new, g_new = q, p, lp, grad
        diverged = np.zeros(n_chains, dtype=bool)
        e = cur_eps[:, None]
        for step in range(1, n_steps.max() + 1):
            active = (step <= n_steps) & ~diverged
            if not active.any():
                break
            ph = p_new + 0.5 * e * g_new
            qs = q_new + e * metric.velocity(ph)
            with np.errstate(all="ignore"):
                lps, gs = logp_grad(qs)
                n_grad += 1
                ps = ph + 0.5 * e * gs
                h = -lps + metric.kinetic(ps)
            # NaN compares False, so non-finite energies count as divergent
            bad = ~(h - h0 <= MAX_ENERGY_ERROR)
            diverged |= active & bad
            ok = active & ~bad
            if ok.all():
                q_new, p_new, lp_new, g_new = qs, ps, lps, gs
            else:
                m = ok[:, None]
                q_new = np.where(m, qs, q_new)
                p_new = np.where(m, ps, p_new)
                g_new = np.where(m, gs, g_new)
                lp_new = np.where(ok, lps, lp_new)

        h1 = -lp_new + metric.kinetic(p_new)
        with np.errstate(over="ignore", invalid="ignore"):
            accept_stat = np.where(diverged, 0.0, np.minimum(1.0, np.exp(h0 - h1)))
        accept_stat = np.nan_to_num(accept_stat, nan=0.0)
        take = u < accept_stat
        q = np.where(take[:, None], q_new, q)
        grad = np.where(take[:, None], g_new, grad)
        lp = np.where(take, lp_new, lp)

        if warm:
            da.update(accept_stat)
            eps = da.eps
            for a, b in windows:
                if a <= it < b:
                    window_buf.append(q)
                if it == b - 1 and window_buf:
                    pooled = np.concatenate(window_buf, axis=0)
                    metric = _Metric(_estimate_metric(pooled, dense))
                    window_buf = []
                    da.restart(eps)
                    eps = da.eps
        else:
            k = it - n_warmup
            draws[:, k, :] = q
            divergent[:, k] = diverged
            accepted += accept_stat

    return HMCResult(
        draws=draws,
        divergent=divergent,
        step_size=da.final_eps,
        inv_mass=metric.inv_mass,
        accept_rate=accepted / max(n_draws, 1),
        n_grad=n_grad,
    )


# --- diagnostics ------------------------------------------------------------

def split_rhat(x: np.ndarray) -> np.ndarray:
    """Split-chain potential scale reduction for draws shaped (chains, draws, dim)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    c, n, d = x.shape
    half = n // 2
    if half < 2:
        return np.full(d, np.nan)
    parts = np.concatenate([x[:, :half], x[:, n - half:]], axis=0)
    m = parts.shape[1]
    means = parts.mean(axis=1)
    within = parts.var(axis=1, ddof=1).mean(axis=0)
    between = m * means.var(axis=0, ddof=1)
    var_plus = (m - 1) / m * within + between / m
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.sqrt(var_plus / within)
    return np.where(within > 0, rhat, np.where(between > 0, np.inf, 1.0))


def _autocov(x: np.ndarray) -> np.ndarray:
    """Autocovariance along axis 1 for (chains, draws)."""
    n = x.shape[1]
    xc = x - x.mean(axis=1, keepdims=True)
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(xc, n=size, axis=1)
    ac = np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n]
    return ac / n


def ess(x: np.ndarray) -> np.ndarray:
    """Multi-chain effective sample size with Geyer's initial monotone sequence."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[:, :, None]
    c, n, d = x.shape
    out = np.empty(d)
    for j in range(d):
        chains = x[:, :, j]
        acov = _autocov(chains)
        chain_var = acov[:, 0] * n / (n - 1.0)
        within = chain_var.mean()
        var_plus = within * (n - 1.0) / n
        if c > 1:
            var_plus += chains.mean(axis=1).var(ddof=1)
        if var_plus <= 0:
            out[j] = c * n
            continue
        rho = 1.0 - (within - acov.mean(axis=0)) / var_plus
        rho[0] = 1.0
        # pair sums, truncated at the first negative pair, forced monotone
        total = 0.0
        prev = np.inf
        t = 0
        while t + 1 < n:
            pair = rho[t] + rho[t + 1]
            if pair < 0:
                break
            pair = min(pair, prev)
            total += pair
            prev = pair
            t += 2
        tau = -1.0 + 2.0 * total
        out[j] = c * n / max(tau, 1.0 / np.log10(c * n))
    return out
