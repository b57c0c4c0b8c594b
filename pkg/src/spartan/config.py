"""Experiment configuration: defaults, file parsing, validation.

Config files are flat ``key = value`` documents.  Lists use brackets or bare
commas, ``#`` starts a comment.  Unknown keys, type mismatches, and malformed
lines all report their line number.  Command-line flags override file values.
"""

from __future__ import annotations

from dataclasses import dataclass, field


from .training import TrainConfig

DEFAULT_EPSILON_GRID = [round(0.05 * k, 2) for k in range(13)]  # 0.0 .. 0.6


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


@dataclass
class SurrogateSettings:
    seed_size: int = 150
    rounds: int = 5
    aug_step: float = 0.1
    epochs: int = 10
    share: bool = False  # one surrogate per target by default


@dataclass
class ExperimentConfig:
    candidates: list[str] = field(default_factory=lambda: ["standard"])
    train: TrainConfig = field(default_factory=TrainConfig)
    epsilon_grid: list[float] = field(default_factory=lambda: list(DEFAULT_EPSILON_GRID))
    mode: str = "whitebox"
    limit: int | None = None
    data_dir: str = "data"
    out_dir: str = "runs"
    seed: int = 0
    filters: int = 4
    sigma: float = 1.0
    entropy_mode: str = "binary_entropy"
    surrogate: SurrogateSettings = field(default_factory=SurrogateSettings)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.mode not in ("whitebox", "blackbox"):
            raise ConfigError(f"mode must be whitebox or blackbox, got {self.mode!r}")
        eps = self.epsilon_grid
        if any(e < 0 for e in eps):
            raise ConfigError(f"epsilon values must be >= 0, got {eps}")
        if any(a >= b for a, b in zip(eps, eps[1:])):
            raise ConfigError(f"epsilon values must be strictly increasing, got {eps}")
        if self.limit is not None and self.limit < 1:
            raise ConfigError("limit must be >= 1")
        for c in self.candidates:
            if c not in ("standard", "a", "b", "c"):
                raise ConfigError(f"unknown candidate {c!r}")


def _parse_scalar(raw: str, line: int):
    text = raw.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text.strip("\"'")


def _parse_value(raw: str, line: int):
    text = raw.strip()
    if not text:
        raise ConfigError("empty value", line)
    if text.startswith("["):
        if not text.endswith("]"):
            raise ConfigError(f"unterminated list {text!r}", line)
        inner = text[1:-1].strip()
        items = [s for s in (p.strip() for p in inner.split(",")) if s]
        return [_parse_scalar(item, line) for item in items]
    if "," in text:
        return [_parse_scalar(p, line) for p in text.split(",") if p.strip()]
    return _parse_scalar(text, line)


# key -> (expected type, coercion applied after parse)
_SCHEMA: dict[str, type] = {
    "candidates": list,
    "candidate": list,
    "lr": float,
    "batch": int,
    "epochs": int,
    "sf": float,
    "optimizer": str,
    "seed": int,
    "epsilon": list,
    "epsilon_grid": list,
    "mode": str,
    "limit": int,
    "data_dir": str,
    "out": str,
    "filters": int,
    "sigma": float,
    "entropy_mode": str,
    "surrogate_seed_size": int,
    "surrogate_rounds": int,
    "surrogate_aug_step": float,
    "surrogate_epochs": int,
    "share_surrogate": bool,
}


def parse_config_text(text: str, strict: bool = True) -> dict:
    """Parse a flat key=value document into a validated mapping."""
    values: dict = {}
    for lineno, rawline in enumerate(text.splitlines(), start=1):
        line = rawline.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {line!r}", lineno)
        key, _, raw = line.partition("=")
        key = key.strip().lower().replace("-", "_")
        if key not in _SCHEMA:
            if strict:
                raise ConfigError(f"unknown key {key!r}", lineno)
            continue
        value = _parse_value(raw, lineno)
        expected = _SCHEMA[key]
        if expected is list and not isinstance(value, list):
            value = [value]
        elif expected is float and isinstance(value, (int, float)) and not isinstance(value, bool):
            value = float(value)
        elif expected is int:
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{key} expects an integer, got {value!r}", lineno)
        elif not isinstance(value, expected):
            raise ConfigError(f"{key} expects {expected.__name__}, got {value!r}", lineno)
        values[key] = value
    return values


def parse_config(path, strict: bool = True) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        values = parse_config_text(fh.read(), strict=strict)
    return config_from_values(values)


def config_from_values(values: dict, overrides: dict | None = None) -> ExperimentConfig:
    """Build an ExperimentConfig from parsed file values plus CLI overrides."""
    merged = dict(values)
    for key, val in (overrides or {}).items():
        if val is not None:
            merged[key] = val
    candidates = merged.get("candidates", merged.get("candidate", ["standard"]))
    candidates = [str(c).lower() for c in candidates]
    epsilon = merged.get("epsilon_grid", merged.get("epsilon", list(DEFAULT_EPSILON_GRID)))
    epsilon = [float(e) for e in epsilon]
    seed = int(merged.get("seed", 0))
    train = TrainConfig(
        learning_rate=float(merged.get("lr", 1e-3)),
        batch_size=int(merged.get("batch", 64)),
        epochs=int(merged.get("epochs", 10)),
        filter_scale=float(merged.get("sf", 1e-5)),
        optimizer=str(merged.get("optimizer", "adam")),
        seed=seed,
    )
    surrogate = SurrogateSettings(
        seed_size=int(merged.get("surrogate_seed_size", 150)),
        rounds=int(merged.get("surrogate_rounds", 5)),
        aug_step=float(merged.get("surrogate_aug_step", 0.1)),
        epochs=int(merged.get("surrogate_epochs", 10)),
        share=bool(merged.get("share_surrogate", False)),
    )
    limit = merged.get("limit")
    return ExperimentConfig(
        candidates=candidates,
        train=train,
        epsilon_grid=epsilon,
        mode=str(merged.get("mode", "whitebox")),
        limit=None if limit is None else int(limit),
        data_dir=str(merged.get("data_dir", "data")),
        out_dir=str(merged.get("out", "runs")),
        seed=seed,
        filters=int(merged.get("filters", 4)),
        sigma=float(merged.get("sigma", 1.0)),
        entropy_mode=str(merged.get("entropy_mode", "binary_entropy")),
        surrogate=surrogate,
    )
