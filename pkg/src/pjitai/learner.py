"""Hierarchical Bayesian logistic regression fitted by HMC.

Population coefficients get zero-centred Student-t (or normal) priors
whose standard deviation shrinks with interaction order.  Participant
deviations for random-scope terms are ``tau_k * z_ik`` with
``z ~ N(0, 1)``.  By default ``tau_k`` is held at the prior scale of the
matching population term; ``random_effect_scale="half_t"`` learns it
under a half-Student-t(3) prior instead.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import hmc
from .design import DesignData, design_matrix, from_records, random_term_index, rows_for
from .domain import (
    CovariateSchema,
    ContextVector,
    DecisionRecord,
    StudyClock,
    observed_levels,
)
from .modelspec import FIXED, RANDOM, ModelSpec

DEFAULT_SCALES = {1: 1.0, 2: 0.25, 3: 0.0625, 4: 0.0156}
RHAT_MAX = 1.05
DIVERGENCE_MAX = 0.01


@dataclass(frozen=True)
class PriorSpec:
    scale_by_order: Mapping[int, float] = field(default_factory=lambda: dict(DEFAULT_SCALES))
    family: str = "student_t"
    df: float = 7.0
    random_effect_df: float = 3.0
    random_effect_scale: str = "fixed"

    def __post_init__(self):
        orders = sorted(self.scale_by_order)
        scales = [self.scale_by_order[o] for o in orders]
        if orders != list(range(1, len(orders) + 1)):
            raise ValueError("scale_by_order must cover orders 1..k")
        if any(b >= a for a, b in zip(scales, scales[1:])) or scales[-1] <= 0:
            raise ValueError("prior scales must be positive and strictly decreasing")
        if self.random_effect_scale not in ("fixed", "half_t"):
            raise ValueError(f"random_effect_scale must be 'fixed' or 'half_t', got {self.random_effect_scale!r}")
        if self.family not in ("student_t", "normal"):
            raise ValueError(f"unknown prior family {self.family!r}")
        if self.family == "student_t" and self.df <= 2:
            raise ValueError("student_t prior needs df > 2 for a finite SD")


def prior_scale(order: int, prior: PriorSpec = PriorSpec()) -> float:
    """Prior standard deviation for a term with ``order`` multiplied factors.

    Orders past the table continue with the table's ratio of 1/4 per order.
    """
    if order < 1:
        raise ValueError(f"interaction order must be >= 1, got {order}")
    table = prior.scale_by_order
    top = max(table)
    if order <= top:
        return float(table[order])
    return float(table[top]) * 0.25 ** (order - top)


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup_draws: int = 1000
    kept_draws: int = 1000
    seed: int = 0
    target_acceptance: float = 0.8
    trajectory_length: float = 1.5
    max_leapfrog: int = 128

    def __post_init__(self):
        if self.chains < 2:
            raise ValueError("need at least 2 chains for convergence diagnostics")
        if self.kept_draws < 1 or self.warmup_draws < 0:
            raise ValueError("draw counts must be positive")
        if not 0 < self.target_acceptance < 1:
            raise ValueError("target_acceptance must be in (0, 1)")


@dataclass(frozen=True)
class FitHealth:
    status: str
    offending: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> dict:
        return {"status": self.status, "offending": list(self.offending)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "FitHealth":
        return cls(d["status"], tuple(d.get("offending", ())))


@dataclass(frozen=True)
class PosteriorDraws:
    values: np.ndarray  # (total draws, parameters)
    names: tuple[str, ...]
    n_fixed: int
    n_tau: int
    participants: tuple[str, ...]
    n_random_cols: int
    rhat: np.ndarray
    ess: np.ndarray
    divergences: int
    chains: int
    spec: ModelSpec
    observed: Mapping[str, frozenset]
    seconds: float = 0.0

    @property
    def n_draws(self) -> int:
        return self.values.shape[0]

    @property
    def beta(self) -> np.ndarray:
        return self.values[:, : self.n_fixed]

    @property
    def tau(self) -> np.ndarray:
        return self.values[:, self.n_fixed : self.n_fixed + self.n_tau]

    def random_effects(self, participant: str) -> np.ndarray:
        """(draws, random columns) deviations for one participant."""
        i = self.participants.index(participant)
        start = self.n_fixed + self.n_tau + i * self.n_random_cols
        return self.values[:, start : start + self.n_random_cols]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.values).tobytes()).hexdigest()


def _softplus_sigmoid(eta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """log(1 + e^eta) and 1 / (1 + e^-eta) sharing one exponential."""
    e = np.exp(-np.abs(eta))
    softplus = np.maximum(eta, 0.0) + np.log1p(e)
    inv = 1.0 / (1.0 + e)
    prob = np.where(eta >= 0, inv, e * inv)
    return softplus, prob


def _collapse(data: DesignData) -> tuple[DesignData, np.ndarray]:
    """Merge rows with identical covariates into binomial counts."""
    if data.n == 0:
        return data, np.zeros(0)
    keys = np.column_stack([data.codes, data.actions, data.s1, data.s2, data.pid]).astype(np.int64)
    uniq, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    successes = np.bincount(inverse, weights=data.rewards, minlength=len(uniq))
    trials = np.bincount(inverse, minlength=len(uniq)).astype(float)
    merged = DesignData(
        codes=data.codes[first],
        actions=data.actions[first],
        s1=data.s1[first],
        s2=data.s2[first],
        rewards=successes,
        pid=data.pid[first],
        participants=data.participants,
    )
    return merged, trials


class _Model:
    """Log posterior and gradient on the unconstrained, prior-scaled vector."""

    def __init__(self, data: DesignData, spec: ModelSpec, schema: CovariateSchema, prior: PriorSpec, baseline=None):
        self.spec = spec
        data, trials = _collapse(data)
        X = design_matrix(spec, data, schema, FIXED, baseline)
        self.scale = np.array(
            [prior_scale(t.interaction_order, prior) for t in spec.fixed_terms for _ in spec.term_columns(t)]
        )
        self.Xs = X * self.scale[None, :]
        self.y = data.rewards
        self.trials = trials
        self.n_obs = data.n
        self.family = prior.family
        self.df = prior.df
        self.t_c = np.sqrt((prior.df - 2.0) / prior.df) if prior.family == "student_t" else 1.0

        self.rand_terms = spec.random_terms
        self.Xr = design_matrix(spec, data, schema, RANDOM, baseline)
        self.col_term = random_term_index(spec)
        self.n_part = len(data.participants)
        self.pid = data.pid
        self.Pt = np.zeros((self.n_part, data.n))
        if data.n:
            self.Pt[data.pid, np.arange(data.n)] = 1.0
        self.K = len(self.rand_terms)
        self.R = self.Xr.shape[1]
        self.tau_scale = np.array([prior_scale(t.interaction_order, prior) for t in self.rand_terms])
        self.tau_df = prior.random_effect_df
        self.learn_tau = prior.random_effect_scale == "half_t"
        self.n_lt = self.K if self.learn_tau else 0
        self.col_to_term = np.zeros((self.R, self.K))
        if self.R:
            self.col_to_term[np.arange(self.R), self.col_term] = 1.0
        self.nf = self.Xs.shape[1]
        self.dim = self.nf + self.n_lt + self.n_part * self.R
        # with known deviation scales the predictor is linear in theta
        self.joint = None if self.learn_tau else self._joint_design()
        self.joint_t = None if self.joint is None else np.ascontiguousarray(self.joint.T)

    def _joint_design(self) -> np.ndarray:
        n = self.n_obs
        jac = np.zeros((n, self.dim))
        jac[:, : self.nf] = self.Xs
        if self.R and n:
            zcols = self.Xr * self.tau_scale[self.col_term][None, :]
            idx = self.nf + self.n_lt + self.pid[:, None] * self.R + np.arange(self.R)[None, :]
            np.put_along_axis(jac, idx, zcols, axis=1)
        return jac

    def split(self, theta):
        u = theta[:, : self.nf]
        lt = theta[:, self.nf : self.nf + self.n_lt]
        z = theta[:, self.nf + self.n_lt :].reshape(theta.shape[0], self.n_part, self.R)
        return u, lt, z

    def __call__(self, theta: np.ndarray):
        if self.joint is not None:
            return self._linear_call(theta)
        u, lt, z = self.split(theta)
        C = theta.shape[0]
        if self.family == "student_t":
            x = u / self.t_c
            lp = -0.5 * (self.df + 1) * np.sum(np.log1p(x * x / self.df), axis=1)
            g_u = -(self.df + 1) * x / ((self.df + x * x) * self.t_c)
        else:
            lp = -0.5 * np.sum(u * u, axis=1)
            g_u = -u
        eta = u @ self.Xs.T
        g_lt = np.zeros((C, self.n_lt))
        g_z = np.zeros_like(z)
        use_re = self.R > 0 and self.n_obs > 0
        if self.K:
            if self.learn_tau:
                tau = np.exp(lt)
                ratio = tau / self.tau_scale
                nu = self.tau_df
                lp = lp - 0.5 * (nu + 1) * np.sum(np.log1p(ratio * ratio / nu), axis=1) + np.sum(lt, axis=1)
                g_lt = -(nu + 1) * ratio * ratio / (nu + ratio * ratio) + 1.0
            else:
                tau = np.broadcast_to(self.tau_scale, (C, self.K))
            lp = lp - 0.5 * np.sum(z * z, axis=(1, 2))
            g_z = -z
            if use_re:
                tau_col = tau[:, self.col_term]
                zx = z[:, self.pid, :] * self.Xr[None, :, :]
                eta = eta + (zx * tau_col[:, None, :]).sum(axis=2)
        if self.n_obs:
            softplus, prob = _softplus_sigmoid(eta)
            lp = lp + np.sum(self.y * eta - self.trials * softplus, axis=1)
            resid = self.y - self.trials * prob
            g_u = g_u + resid @ self.Xs
            if self.K and use_re:
                rx = resid[:, :, None] * self.Xr[None, :, :]
                g_z = g_z + np.matmul(self.Pt, rx) * tau_col[:, None, :]
                if self.learn_tau:
                    g_lt = g_lt + ((rx * zx).sum(axis=1) * tau_col) @ self.col_to_term
        grad = np.concatenate([g_u, g_lt, g_z.reshape(C, -1)], axis=1)
        return lp, grad

    def _linear_call(self, theta: np.ndarray):
        u = theta[:, : self.nf]
        z = theta[:, self.nf :]
        if self.family == "student_t":
            x = u / self.t_c
            lp = -0.5 * (self.df + 1) * np.sum(np.log1p(x * x / self.df), axis=1)
            g_u = -(self.df + 1) * x / ((self.df + x * x) * self.t_c)
        else:
            lp = -0.5 * np.sum(u * u, axis=1)
            g_u = -u
        lp = lp - 0.5 * np.sum(z * z, axis=1)
        grad = np.concatenate([g_u, -z], axis=1)
        if self.n_obs:
            eta = theta @ self.joint_t
            softplus, prob = _softplus_sigmoid(eta)
            lp = lp + (eta * self.y - softplus * self.trials).sum(axis=1)
            grad = grad + (self.y - self.trials * prob) @ self.joint
        return lp, grad

    def init(self, rngs):
        rows = []
        for g in rngs:
            u = g.uniform(-1, 1, self.nf)
            lt = np.log(self.tau_scale) + g.uniform(-1, 0, self.n_lt) if self.learn_tau else np.zeros(0)
            z = g.uniform(-1, 1, self.n_part * self.R)
            rows.append(np.concatenate([u, lt, z]))
        return np.array(rows).reshape(len(rngs), self.dim)

    def guess_inv_mass(self) -> np.ndarray:
        """Inverse of prior precision plus logistic Fisher information at eta = 0.

        Random-effect columns use the prior scale as the deviation SD.
        """
        jac = self.joint if self.joint is not None else self._joint_design()
        info = np.eye(self.dim) + 0.25 * (jac.T * self.trials) @ jac
        return np.linalg.inv(info)

    def constrain(self, flat: np.ndarray) -> np.ndarray:
        """Map unconstrained draws (n, dim) to (beta, tau, b) columns."""
        u, lt, z = self.split(flat)
        beta = u * self.scale[None, :]
        tau = np.exp(lt) if self.learn_tau else np.zeros((flat.shape[0], 0))
        col_sd = tau[:, self.col_term] if self.learn_tau else np.broadcast_to(self.tau_scale[self.col_term], (flat.shape[0], self.R))
        b = z * col_sd[:, None, :] if self.K else z
        return np.concatenate([beta, tau, b.reshape(flat.shape[0], -1)], axis=1)


def chain_generators(seed: int, chains: int) -> list[np.random.Generator]:
    return [np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(c,)))) for c in range(chains)]


def fit_posterior(
    data: Sequence[DecisionRecord],
    spec: ModelSpec,
    schema: CovariateSchema,
    prior: PriorSpec = PriorSpec(),
    cfg: SamplerConfig = SamplerConfig(),
    baseline: Mapping[str, tuple[float, str]] | None = None,
) -> tuple[PosteriorDraws | None, FitHealth]:
    """Sample the posterior of ``spec`` given ``data``.

    Returns ``(None, FitHealth("broken-no-draws", ...))`` when sampling fails
    numerically; otherwise the draws and a health verdict based on split
    R-hat and the divergence fraction of the kept draws.
    """
    t0 = time.perf_counter()
    dd = from_records(data, schema)
    model = _Model(dd, spec, schema, prior, baseline)
    rngs = chain_generators(cfg.seed, cfg.chains)
    try:
        res = hmc.sample(
            model,
            model.init(rngs),
            rngs,
            n_warmup=cfg.warmup_draws,
            n_draws=cfg.kept_draws,
            target_accept=cfg.target_acceptance,
            trajectory_length=cfg.trajectory_length,
            max_leapfrog=cfg.max_leapfrog,
            init_inv_mass=model.guess_inv_mass(),
        )
    except (FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
        return None, FitHealth("broken-no-draws", (f"{type(exc).__name__}: {exc}",))

    C, S, D = res.draws.shape
    flat = model.constrain(res.draws.reshape(C * S, D))
    if not np.all(np.isfinite(flat)):
        return None, FitHealth("broken-no-draws", ("non-finite draws",))
    by_chain = flat.reshape(C, S, -1)
    rhat = hmc.split_rhat(by_chain)
    ess = hmc.ess(by_chain)

    fixed_names = spec.fixed_columns()
    tau_names = [f"sd({t.label})" for t in spec.random_terms] if prior.random_effect_scale == "half_t" else []
    rand_cols = [c for _, c in spec.random_columns()]
    b_names = [f"b[{p}][{c}]" for p in dd.participants for c in rand_cols]
    names = tuple(fixed_names + tau_names + b_names)

    n_div = int(res.divergent.sum())
    offending = [f"rhat[{n}]={r:.3f}" for n, r in zip(names, rhat) if not r <= RHAT_MAX]
    if n_div > DIVERGENCE_MAX * C * S:
        offending.append(f"divergences={n_div}/{C * S}")
    health = FitHealth("broken-mixing" if offending else "ok", tuple(offending))

    seen = observed_levels(data, schema)
    draws = PosteriorDraws(
        values=flat,
        names=names,
        n_fixed=len(fixed_names),
        n_tau=len(tau_names),
        participants=tuple(dd.participants),
        n_random_cols=len(rand_cols),
        rhat=rhat,
        ess=ess,
        divergences=n_div,
        chains=C,
        spec=spec,
        observed={k: frozenset(v) for k, v in seen.items()},
        seconds=time.perf_counter() - t0,
    )
    return draws, health


def linear_predictor(
    draws: PosteriorDraws,
    spec: ModelSpec,
    schema: CovariateSchema,
    data: DesignData,
    participant: str | None = None,
    baseline: Mapping[str, tuple[float, str]] | None = None,
) -> np.ndarray:
    """(draws, rows) linear predictor; ``participant=None`` means population level."""
    X = design_matrix(spec, data, schema, FIXED, baseline)
    eta = draws.beta @ X.T
    if participant is not None and draws.n_random_cols:
        Xr = design_matrix(spec, data, schema, RANDOM, baseline)
        eta = eta + draws.random_effects(participant) @ Xr.T
    return eta


def predict_success(
    draws: PosteriorDraws,
    spec: ModelSpec,
    schema: CovariateSchema,
    ctx: ContextVector,
    action: int,
    clock: StudyClock,
    participant: str | None = None,
) -> np.ndarray:
    """Per-draw success probability for one (context, action, period)."""
    _check_predictable(spec, schema, ctx)
    rows = rows_for([ctx], [action], [(clock.s1, clock.s2)], schema, participant)
    eta = linear_predictor(draws, spec, schema, rows, participant)[:, 0]
    return 1.0 / (1.0 + np.exp(-eta))


def _check_predictable(spec: ModelSpec, schema: CovariateSchema, ctx: ContextVector):
    if len(ctx) != len(schema):
        raise ValueError("context length does not match schema")
    for var, lv in zip(schema.variables, ctx.levels):
        enc = spec.encoding_for(var.name)
        if lv != enc.reference and lv not in enc.levels:
            raise ValueError(f"level {lv!r} of {var.name} is not represented in the fitted model")


# --- serialization ------------------------------------------------------------

def draws_to_csv(draws: PosteriorDraws) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(draws.names)
    for row in draws.values:
        w.writerow([repr(float(x)) for x in row])
    return buf.getvalue()


def diagnostics_json(draws: PosteriorDraws, health: FitHealth, prior: PriorSpec, cfg: SamplerConfig) -> str:
    doc = {
        "health": health.to_dict(),
        "chains": draws.chains,
        "n_draws": draws.n_draws,
        "divergences": draws.divergences,
        "n_fixed": draws.n_fixed,
        "n_tau": draws.n_tau,
        "n_random_cols": draws.n_random_cols,
        "participants": list(draws.participants),
        "rhat": {n: float(r) for n, r in zip(draws.names, draws.rhat)},
        "ess": {n: float(e) for n, e in zip(draws.names, draws.ess)},
        "observed_levels": {k: sorted(v) for k, v in draws.observed.items()},
        "checksum": draws.checksum(),
        "prior": {
            "scale_by_order": {str(k): v for k, v in prior.scale_by_order.items()},
            "family": prior.family,
            "df": prior.df,
            "random_effect_df": prior.random_effect_df,
        },
        "sampler": {
            "chains": cfg.chains,
            "warmup_draws": cfg.warmup_draws,
            "kept_draws": cfg.kept_draws,
            "seed": cfg.seed,
            "target_acceptance": cfg.target_acceptance,
        },
        "spec": draws.spec.to_dict(),
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def draws_from_files(csv_text: str, diag_text: str) -> tuple[PosteriorDraws, FitHealth]:
    diag = json.loads(diag_text)
    rows = list(csv.reader(io.StringIO(csv_text)))
    names = tuple(rows[0])
    values = np.array([[float(x) for x in r] for r in rows[1:]], dtype=float).reshape(len(rows) - 1, len(names))
    draws = PosteriorDraws(
        values=values,
        names=names,
        n_fixed=diag["n_fixed"],
        n_tau=diag["n_tau"],
        participants=tuple(diag["participants"]),
        n_random_cols=diag["n_random_cols"],
        rhat=np.array([diag["rhat"][n] for n in names]),
        ess=np.array([diag["ess"][n] for n in names]),
        divergences=diag["divergences"],
        chains=diag["chains"],
        spec=ModelSpec.from_dict(diag["spec"]),
        observed={k: frozenset(v) for k, v in diag["observed_levels"].items()},
    )
    return draws, FitHealth.from_dict(diag["health"])
