"""Configuration for training on noisy labels."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

METHODS = ("ce", "coteaching", "dividemix")
# symmetric noise rates at which the unlabeled loss weight is switched off
LAMBDA_U_OFF_RATES = (0.5, 0.6, 0.7)


@dataclass(frozen=True)
class LNLConfig:
    method: str = "ce"
    # total epochs, warm-up included
    epochs: int = 50
    batch_size: int | None = None
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_epochs: int = 10
    freeze: str = "plastic"
    noise_kind: str = "symmetric"
    noise_rate: float = 0.0
    # co-teaching: forget rate tau (defaults to the noise rate), ramp length t_k and exponent
    tau: float | None = None
    t_k: int = 10
    c_exp: float = 1.0
    # semi-supervised refinement
    augmentations: int = 2
    alpha: float = 4.0
    lambda_u: float | None = None
    temperature: float = 0.2
    p_threshold: float = 0.5
    architecture: str = "resnet18"
    input_size: int = 224
    class_weighting: bool = False
    eval_batch_size: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; known: {METHODS}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")
        if self.freeze not in ("plastic", "frozen"):
            raise ValueError(f"unknown freeze mode {self.freeze!r}")
        if self.noise_kind not in ("symmetric", "class_dependent"):
            raise ValueError(f"unknown noise kind {self.noise_kind!r}")
        if self.t_k <= 0:
            raise ValueError("t_k must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def resolved_batch_size(self) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 128 if self.method == "dividemix" else 256

    @property
    def resolved_tau(self) -> float:
        return self.noise_rate if self.tau is None else self.tau

    @property
    def resolved_lambda_u(self) -> float:
        if self.lambda_u is not None:
            return self.lambda_u
        if self.noise_kind == "symmetric" and any(abs(self.noise_rate - r) < 1e-9 for r in LAMBDA_U_OFF_RATES):
            return 0.0
        return 25.0

    @classmethod
    def for_profile(cls, profile_key: str, **overrides) -> "LNLConfig":
        """Defaults with the dataset's epoch budget and sharpening temperature."""
        from nlbench.presets import profile

        p = profile(profile_key)
        return cls(**{"epochs": p.lnl_epochs, "temperature": p.sharpen_temperature, **overrides})

    def with_overrides(self, **kw) -> "LNLConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LNLConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown LNL config keys {sorted(unknown)}")
        return cls(**d)
