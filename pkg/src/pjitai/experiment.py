"""Experiment configuration, seed derivation and replicate execution."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from typing import Any, Mapping

from .domain import CovariateSchema, binary_schema, default_schema
from .evaluation import cumulative_regret
from .learner import PriorSpec, SamplerConfig
from .modelspec import SpecConfig
from .policy import ClipBounds
from .simulator import AlgorithmKind, GenerativeModel, TrialConfig, TrialResult, sample_coefficients, simulate_trial

ALGORITHMS = tuple(a.value for a in AlgorithmKind)


def derive_seed(master: int, *labels: Any) -> int:
    """Stable 63-bit seed from a master seed and labels.

    Adding an algorithm or replicate never changes seeds of the others.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master)).encode())
    for lab in labels:
        h.update(b"\x00" + str(lab).encode())
    return int.from_bytes(h.digest(), "big") >> 1


def schema_by_name(name: str) -> CovariateSchema:
    if name == "default":
        return default_schema()
    if name.startswith("binary"):
        return binary_schema(int(name[len("binary"):] or 3))
    raise ValueError(f"unknown schema {name!r}; use 'default' or 'binaryN'")


@dataclass(frozen=True)
class ExperimentConfig:
    setting: int = 1
    algorithms: tuple[str, ...] = ALGORITHMS
    replicates: Mapping[str, int] = field(default_factory=lambda: {"simple": 50, "ls4l2": 50, "complicated": 5})
    seed: int = 0
    schema: str = "binary3"
    trial: TrialConfig = field(default_factory=TrialConfig)
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig(warmup_draws=300, kept_draws=500))
    spec: SpecConfig = field(default_factory=SpecConfig)
    prior: PriorSpec = field(default_factory=PriorSpec)
    clip: ClipBounds = field(default_factory=ClipBounds)

    def __post_init__(self):
        object.__setattr__(self, "algorithms", tuple(self.algorithms))
        object.__setattr__(self, "replicates", dict(self.replicates))
        if self.setting not in (1, 2):
            raise ValueError(f"setting: must be 1 or 2, got {self.setting!r}")
        for a in self.algorithms:
            if a not in ALGORITHMS:
                raise ValueError(f"algorithms: unknown algorithm {a!r}")
            if self.replicates.get(a, 0) < 1:
                raise ValueError(f"replicates.{a}: must be >= 1")
        schema_by_name(self.schema)

    def n_replicates(self, algo: str) -> int:
        return int(self.replicates[algo])

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["algorithms"] = list(self.algorithms)
        d["prior"]["scale_by_order"] = {str(k): v for k, v in self.prior.scale_by_order.items()}
        d["trial"]["context_weights"] = {k: list(v) for k, v in self.trial.context_weights.items()}
        return d


_SECTIONS = {
    "trial": TrialConfig,
    "sampler": SamplerConfig,
    "spec": SpecConfig,
    "prior": PriorSpec,
    "clip": ClipBounds,
}


def config_from_dict(d: Mapping, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Layer a (possibly partial) mapping on top of ``base``.

    Unknown keys raise ValueError naming the offending field path.
    """
    base = base or ExperimentConfig()
    top = {f.name for f in dataclasses.fields(ExperimentConfig)}
    kwargs = {}
    for key, val in d.items():
        if key not in top:
            raise ValueError(f"{key}: unknown configuration field")
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            names = {f.name for f in dataclasses.fields(cls)}
            for sub in val:
                if sub not in names:
                    raise ValueError(f"{key}.{sub}: unknown configuration field")
            cur = dataclasses.asdict(getattr(base, key))
            cur.update(val)
            if key == "prior":
                cur["scale_by_order"] = {int(k): float(v) for k, v in cur["scale_by_order"].items()}
            try:
                kwargs[key] = cls(**cur)
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{key}: {exc}") from None
        elif key == "replicates" and isinstance(val, int):
            kwargs[key] = {a: val for a in ALGORITHMS}
        else:
            kwargs[key] = val
    try:
        return dataclasses.replace(base, **kwargs)
    except TypeError as exc:
        raise ValueError(str(exc)) from None


def replicate_model(cfg: ExperimentConfig, rep: int) -> GenerativeModel:
    return sample_coefficients(cfg.setting, schema_by_name(cfg.schema), derive_seed(cfg.seed, "model", cfg.setting, rep))


def run_replicate(
    cfg: ExperimentConfig, algo: str, rep: int, model: GenerativeModel | None = None, raise_on_broken: bool = True
) -> TrialResult:
    """One trial.  Environment and truth are shared across algorithms for the same replicate.

    With ``raise_on_broken=False`` a broken update leaves the affected
    participants on their previous policy instead of aborting.
    """
    model = model or replicate_model(cfg, rep)
    trial = dataclasses.replace(cfg.trial, seed=derive_seed(cfg.seed, "env", cfg.setting, rep))
    return simulate_trial(
        trial,
        algo,
        model,
        schema_by_name(cfg.schema),
        spec_cfg=cfg.spec,
        prior=cfg.prior,
        sampler=cfg.sampler,
        clip=cfg.clip,
        learner_seed=derive_seed(cfg.seed, algo, cfg.setting, rep),
        raise_on_broken=raise_on_broken,
    )


def final_regrets(result: TrialResult) -> dict[str, float]:
    return {
        "realized": float(cumulative_regret(result.records).cumulative[-1]),
        "expected": float(cumulative_regret(result.records, expected=True).cumulative[-1]),
        "n_decisions": len(result.records),
    }
