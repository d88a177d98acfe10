"""Run configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .data import LAYOUTS, MIX_SCHEMES, OOD_KINDS, AugmentConfig
from .energy import EnergyConfig

MODES = ("sefoss", "supervised", "fixmatch_baseline")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


def _f(default, doc, **kw):
    return field(default=default, metadata={"doc": doc, **kw})


@dataclass
class RunConfig:
    # schedule
    K: int = _f(6000, "total training steps")
    K_p: int = _f(750, "pre-training steps (constant lr, no pseudo-labeling or energy loss)")
    eta0: float = _f(0.03, "initial learning rate")
    gamma: float = _f(0.875, "cosine decay-rate parameter, 0 < gamma <= 1")
    B: int = _f(64, "labeled batch size")
    mu: int = _f(7, "unlabeled-to-labeled batch ratio")
    # loss weights
    w_p: float = _f(1.0, "pseudo-labeling weight after pre-training")
    w_s: float = _f(5.0, "self-supervision weight")
    w_e: float = _f(5e-3, "energy-regularization weight after pre-training")
    w_w: float = _f(5e-3, "weight-decay weight")
    # optimizer
    momentum: float = _f(0.9, "Nesterov momentum")
    ema_momentum: float = _f(0.99, "EMA momentum for evaluation and calibration")
    # open-set scoring
    beta: float = _f(1.0, "free-energy temperature")
    scale_id: float = _f(0.2, "inlier threshold = median - IQR * scale_id")
    scale_ood_threshold: float = _f(1.3, "outlier threshold = median + IQR * scale_ood_threshold")
    scale_ood_margin: float = _f(1.9, "hinge margin = median + IQR * scale_ood_margin")
    tau_id_override: float | None = _f(None, "replace the calibrated inlier threshold (none = calibrated)")
    # modes
    mode: str = _f("sefoss", "one of: " + ", ".join(MODES), choices=MODES)
    use_lp: bool = _f(True, "enable pseudo-labeling after pre-training")
    use_le: bool = _f(True, "enable energy regularization after pre-training")
    fixmatch_conf_threshold: float = _f(0.95, "softmax confidence threshold in fixmatch_baseline mode")
    seed: int = _f(0, "master seed (data, init and batch streams)")
    eval_every: int = _f(250, "evaluate the EMA model every this many steps")
    checkpoint_every: int = _f(0, "write a resumable checkpoint every this many steps (0 = final only)")
    # model
    hidden_sizes: tuple = _f((32,), "backbone hidden widths, comma separated (empty = linear)")
    feature_dim: int = _f(32, "feature dimension d")
    # data
    D: int = _f(8, "input dimension")
    C: int = _f(4, "number of ID classes")
    n_labeled: int = _f(40, "labeled examples (divisible by C)")
    n_unlabeled: int = _f(4000, "unlabeled pool size")
    ood_fraction: float = _f(0.5, "fraction of OOD samples in the unlabeled pool")
    ood_kind: str = _f("extra_clusters", "OOD generator: " + ", ".join(OOD_KINDS), choices=OOD_KINDS)
    n_ood_clusters: int = _f(2, "number of extra OOD clusters")
    layout: str = _f("sphere", "cluster placement: " + ", ".join(LAYOUTS), choices=LAYOUTS)
    cluster_spread: float = _f(5.0, "distance between neighbouring cluster means, in cluster stds")
    ood_radius: float = _f(1.0, "OOD cluster distance from the origin, relative to the ID ring")
    cluster_std: float = _f(1.0, "per-coordinate std of every cluster")
    n_test_per_class: int = _f(250, "ID test examples per class")
    n_test_ood: int = _f(1000, "OOD test examples")
    mix: str = _f("fixed_total", "unlabeled composition: " + ", ".join(MIX_SCHEMES), choices=MIX_SCHEMES)
    data_seed: int | None = _f(None, "seed for data generation (none = seed)")
    # augmentation
    weak_noise_sigma: float = _f(0.05, "weak view Gaussian noise std")
    strong_noise_sigma: float = _f(0.15, "strong view Gaussian noise std")
    strong_mask_prob: float = _f(0.2, "strong view per-coordinate dropout probability")
    strong_scale_lo: float = _f(0.8, "strong view rescale lower bound")
    strong_scale_hi: float = _f(1.2, "strong view rescale upper bound")

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0 <= self.K_p <= self.K:
            raise ConfigError(f"need 0 <= K_p <= K, got K_p={self.K_p}, K={self.K}", "K_p")
        for key in ("w_p", "w_s", "w_e", "w_w"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative", key)
        if not self.eta0 > 0:
            raise ConfigError("eta0 must be positive", "eta0")
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]", "gamma")
        if not 0 < self.fixmatch_conf_threshold <= 1:
            raise ConfigError("fixmatch_conf_threshold must lie in (0, 1]", "fixmatch_conf_threshold")
        if self.B < 1 or self.mu < 0:
            raise ConfigError("need B >= 1 and mu >= 0", "B")
        if self.C < 1 or self.n_labeled % self.C:
            raise ConfigError(f"n_labeled={self.n_labeled} is not divisible by C={self.C}", "n_labeled")
        if not 0.0 <= self.ood_fraction <= 1.0:
            raise ConfigError("ood_fraction must lie in [0, 1]", "ood_fraction")
        if self.layout == "sphere" and self.D < self.C + max(self.n_ood_clusters, 1):
            raise ConfigError("sphere layout needs D >= C + n_ood_clusters", "D")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1", "eval_every")
        for f in dataclasses.fields(self):
            choices = f.metadata.get("choices")
            if choices and getattr(self, f.name) not in choices:
                raise ConfigError(f"{f.name} must be one of {choices}, got {getattr(self, f.name)!r}",
                                  f.name)

    @property
    def energy(self) -> EnergyConfig:
        return EnergyConfig(self.beta, self.scale_id, self.scale_ood_threshold, self.scale_ood_margin)

    @property
    def augment(self) -> AugmentConfig:
        return AugmentConfig(self.weak_noise_sigma, self.strong_noise_sigma, self.strong_mask_prob,
                             (self.strong_scale_lo, self.strong_scale_hi))

    @property
    def resolved_data_seed(self) -> int:
        return self.seed if self.data_seed is None else self.data_seed

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["hidden_sizes"] = list(self.hidden_sizes)
        return out


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_value(key: str, raw: str) -> Any:
    f = _FIELDS[key]
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    text = raw.strip()
    try:
        if "None" in kind:
            if text.lower() in ("none", ""):
                return None
            kind = kind.replace(" | None", "")
        if kind == "bool":
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "tuple":
            return tuple(int(p) for p in text.split(",") if p.strip())
        return text
    except ValueError:
        raise ConfigError(f"cannot parse {key}={raw!r} as {kind}", key) from None


def parse_assignments(lines: Iterable[str], source: str = "<config>") -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, Any] = {}
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {text!r}")
        key, raw = (p.strip() for p in text.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}", key)
        values[key] = _parse_value(key, raw)
    return values


def load_config(path=None, overrides: Iterable[str] = (), **extra) -> RunConfig:
    values: dict[str, Any] = {}
    if path is not None:
        values.update(parse_assignments(Path(path).read_text().splitlines(), str(path)))
    values.update(parse_assignments(overrides, "--set"))
    values.update({k: v for k, v in extra.items() if v is not None})
    return RunConfig(**values)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for name, f in _FIELDS.items():
        v = getattr(cfg, name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif v is None:
            v = "none"
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{name} = {v}")
    return "\n".join(lines) + "\n"


def config_markdown() -> str:
    """Reference table of every config key with its default."""
    default = RunConfig()
    rows = ["# Configuration keys", "",
            "Flat `key = value` lines; `#` starts a comment; unknown keys are rejected.",
            "`--set key=value` on the command line is applied after the file.", "",
            "| key | default | meaning |", "|---|---|---|"]
    for name, f in _FIELDS.items():
        v = getattr(default, name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        rows.append(f"| `{name}` | `{v}` | {f.metadata['doc']} |")
    return "\n".join(rows) + "\n"
