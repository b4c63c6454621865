"""Plain-text key=value experiment configuration.

The format is one `key=value` per line, `#` starting a comment, blank
lines ignored. Every module-level precondition is checked at parse time
by constructing the underlying objects (hyperparameters, merge plan,
topology), so a config that parses will also run. format_config writes
the effective config back out in a canonical form that parses to an
identical ExperimentConfig.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .merge import MergePlan
from .nn import LOSSES
from .optim import OPTIMIZERS, HyperParams
from .topology import make_topology

__all__ = [
    "ALPHA_SCALES",
    "ExperimentConfig",
    "format_config",
    "parse_config",
]

ALPHA_SCALES = ("none", "sqrt_n_over_k")
PARTITIONS = ("iid", "class_shard")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs, with documented defaults (see README table)."""

    seed: int = 0
    optimizer: str = "sgd"
    alpha: float = 0.01
    beta: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    clip: float = 0.0
    alpha_scale: str = "none"
    topology: str = "fully_connected"
    agents: int = 5
    merge: str = "activation_match"
    n: int = 1
    matching_batch: int = 256
    match_stat: str = "covariance"
    max_sweeps: int = 50
    classes: int = 10
    dims: int = 16
    samples_per_class: int = 100
    separation: float = 4.0
    test_fraction: float = 0.2
    data_csv: str = ""
    partition: str = "iid"
    hidden: tuple[int, ...] = (32, 32)
    loss: str = "cross_entropy"
    K: int = 200
    batch: int = 32
    eval_every: int = 10
    pretrain_iters: int = 0
    workers: int = 1
    repeats: int = 1
    model_dim: int = 4
    trials: int = 100
    model_a: str = ""
    model_b: str = ""
    out: str = "out"
    plots: bool = True
    sweep_agents: tuple[int, ...] = (2, 4, 8)

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        self.hyperparams()  # raises with the offending key's own message
        if self.alpha_scale not in ALPHA_SCALES:
            raise ValueError(f"alpha_scale must be one of {ALPHA_SCALES}, got {self.alpha_scale!r}")
        if self.agents < 1:
            raise ValueError(f"agents must be >= 1, got {self.agents}")
        # "identity" is accepted for verify-spectral's disconnected example only;
        # custom topologies need explicit edges and stay a library feature
        if self.topology not in ("fully_connected", "ring", "identity"):
            raise ValueError(
                f"topology must be fully_connected, ring, or identity, got {self.topology!r}")
        if self.topology != "identity":
            make_topology(self.topology, self.agents)
        self.merge_plan()
        if self.classes < 2:
            raise ValueError(f"classes must be >= 2, got {self.classes}")
        if self.dims < 1:
            raise ValueError(f"dims must be >= 1, got {self.dims}")
        if self.samples_per_class < 1:
            raise ValueError(f"samples_per_class must be >= 1, got {self.samples_per_class}")
        if self.separation < 0:
            raise ValueError(f"separation must be >= 0, got {self.separation}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")
        if self.partition not in PARTITIONS:
            raise ValueError(f"partition must be one of {PARTITIONS}, got {self.partition!r}")
        if any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden widths must all be >= 1, got {self.hidden}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.pretrain_iters < 0:
            raise ValueError(f"pretrain_iters must be >= 0, got {self.pretrain_iters}")
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if self.repeats < 1:
            raise ValueError(f"repeats must be >= 1, got {self.repeats}")
        if self.model_dim < 1:
            raise ValueError(f"model_dim must be >= 1, got {self.model_dim}")
        if self.trials < 1:
            raise ValueError(f"trials must be >= 1, got {self.trials}")
        if not self.out:
            raise ValueError("out must be a non-empty path")
        if not self.sweep_agents or any(a < 1 for a in self.sweep_agents):
            raise ValueError(f"sweep_agents must list agent counts >= 1, got {self.sweep_agents}")

    def hyperparams(self) -> HyperParams:
        return HyperParams(alpha=self.alpha, beta=self.beta, beta1=self.beta1,
                           beta2=self.beta2, epsilon=self.epsilon, n=self.n,
                           K=self.K, clip=self.clip)

    def merge_plan(self) -> MergePlan:
        return MergePlan(mode=self.merge, frequency_n=self.n,
                         matching_batch=self.matching_batch,
                         match_stat=self.match_stat, max_sweeps=self.max_sweeps)


_INT_TUPLE_KEYS = ("hidden", "sweep_agents")


def _parse_value(key: str, text: str, kind: type):
    text = text.strip()
    if key in _INT_TUPLE_KEYS:
        if not text:
            return ()
        try:
            return tuple(int(part) for part in text.split(","))
        except ValueError:
            raise ValueError(f"{key} must be a comma-separated list of integers, got {text!r}")
    if kind is bool:
        low = text.lower()
        if low not in ("true", "false"):
            raise ValueError(f"{key} must be true or false, got {text!r}")
        return low == "true"
    if kind is int:
        try:
            return int(text)
        except ValueError:
            raise ValueError(f"{key} must be an integer, got {text!r}")
    if kind is float:
        try:
            return float(text)
        except ValueError:
            raise ValueError(f"{key} must be a number, got {text!r}")
    return text


def _split_pair(line: str) -> tuple[str, str]:
    if "=" not in line:
        raise ValueError(f"malformed config line {line!r}; expected key=value")
    key, _, value = line.partition("=")
    return key.strip(), value


def parse_config(path: str | None = None, overrides=()) -> ExperimentConfig:
    """Build a validated config from an optional file plus key=value overrides."""
    concrete = {f.name: type(f.default) for f in fields(ExperimentConfig)}
    raw: dict[str, str] = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, value = _split_pair(line)
                raw[key] = value
    for item in overrides:
        key, value = _split_pair(item)
        raw[key] = value
    kwargs = {}
    for key, value in raw.items():
        if key not in concrete:
            raise ValueError(f"unknown config key {key!r}")
        kwargs[key] = _parse_value(key, value, concrete[key])
    return ExperimentConfig(**kwargs)


def format_config(cfg: ExperimentConfig) -> str:
    """Canonical key=value text; parsing it reproduces cfg exactly."""
    lines = []
    for f in fields(ExperimentConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, tuple):
            text = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{f.name}={text}")
    return "\n".join(lines) + "\n"
