"""Per-task pretraining configuration with the reference recipe as defaults."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace

from nlbench.presets import SSL_EPOCHS

TASKS = ("rotation", "jigsaw", "jigmag", "simclr", "moco", "barlow", "vae")

# task -> (input size, batch, weight decay, learning rate, optimizer, schedule)
_RECIPES = {
    "rotation": (224, 256, 1e-4, 0.01, "sgd", "cosine"),
    "jigsaw": (64, 128, 0.0, 1e-3, "adam", "cosine"),
    "jigmag": (64, 128, 0.0, 1e-4, "adam", "cosine"),
    "simclr": (224, 512, 1e-4, 1e-3, "adam", "cosine"),
    "barlow": (224, 512, 1e-6, 0.2, "lars", "cosine"),
    "moco": (224, 512, 1e-4, 0.01, "sgd", "cosine"),
    "vae": (224, 512, 0.0, 1e-3, "adam", "cosine"),
}


@dataclass(frozen=True)
class SSLTaskConfig:
    task: str
    epochs: int
    batch_size: int
    learning_rate: float
    weight_decay: float
    optimizer: str
    schedule: str
    input_size: int
    # images are loaded at this size; puzzle tasks cut them into patches of input_size
    image_size: int
    architecture: str = "resnet18"
    temperature: float = 0.07
    queue_size: int = 65536
    momentum: float = 0.999
    moco_bn_splits: int = 2
    lambda_off: float = 5.1e-3
    projection_dim: int = 128
    barlow_dim: int = 8192
    beta: float = 0.1
    allow_nonpositive_beta: bool = False
    latent_dim: int = 256
    num_permutations: int = 1000
    permutation_seed: int = 0
    color_strength: float = 0.5
    sample_dir: str | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unsupported task {self.task!r}; known: {TASKS}")
        if self.epochs < 1 or self.batch_size < 2:
            raise ValueError("epochs must be >= 1 and batch_size >= 2")
        if self.optimizer not in ("sgd", "adam", "lars"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    @classmethod
    def defaults(cls, task: str, dataset: str | None = None, **overrides) -> "SSLTaskConfig":
        """Reference recipe for ``task``; epochs come from the per-dataset budget.

        Unknown datasets get the smallest listed budget for the task.
        """
        if task not in TASKS:
            raise ValueError(f"unsupported task {task!r}; known: {TASKS}")
        size, batch, wd, lr, opt, sched = _RECIPES[task]
        budgets = SSL_EPOCHS[task]
        epochs = budgets.get(dataset, min(budgets.values()))
        base = dict(task=task, epochs=epochs, batch_size=batch, learning_rate=lr, weight_decay=wd, optimizer=opt,
                    schedule=sched, input_size=size, image_size=224 if task in ("jigsaw", "jigmag") else size)
        if task == "moco":
            base["temperature"] = 0.2
        unknown = set(overrides) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**{**base, **overrides})

    def with_overrides(self, **kw) -> "SSLTaskConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SSLTaskConfig":
        return cls(**d)
