"""Residual encoders, heads, checkpoints and the plastic/frozen adaptation policy.

Encoders use torchvision's ResNet parameter names (``conv1``, ``bn1``,
``layer1.0.conv1``, ``layer4.1.bn2``, ``...downsample.0``), so a torchvision
``resnet18`` state dict loads into the ``"resnet18"`` architecture once its
``fc.*`` entries are dropped.
"""
from __future__ import annotations

import datetime as _dt
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file

CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class _Arch:
    blocks: tuple[int, int, int, int]
    width: int
    stem: Literal["imagenet", "small"]


ARCHITECTURES: dict[str, _Arch] = {
    "resnet18": _Arch((2, 2, 2, 2), 64, "imagenet"),
    # reduced encoders for desk-scale runs on small images
    "resnet18-w16": _Arch((2, 2, 2, 2), 16, "small"),
    "resnet18-w8": _Arch((2, 2, 2, 2), 8, "small"),
    "resnet10-w16": _Arch((1, 1, 1, 1), 16, "small"),
}


@dataclass(frozen=True)
class EncoderSpec:
    architecture: str = "resnet18"
    input_size: int = 224
    feature_dim: int = 512

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}; known: {sorted(ARCHITECTURES)}")
        if self.input_size < 32 or self.input_size % 32:
            raise ValueError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        expected = 8 * ARCHITECTURES[self.architecture].width
        if self.feature_dim != expected:
            raise ValueError(f"{self.architecture} produces {expected}-d features, not {self.feature_dim}")

    @classmethod
    def for_architecture(cls, architecture: str, input_size: int) -> "EncoderSpec":
        return cls(architecture, input_size, 8 * ARCHITECTURES[architecture].width)

    def compatible(self, other: "EncoderSpec") -> bool:
        """Same weights layout; the input size is a recipe detail that does not change parameters."""
        return (self.architecture, self.feature_dim) == (other.architecture, other.feature_dim)

    def to_dict(self) -> dict:
        return asdict(self)


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride, bias=False), nn.BatchNorm2d(out_ch))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.downsample is None else self.downsample(x)
        return F.relu(out + identity)


class ResNetEncoder(nn.Module):
    """Image -> ``feature_dim`` vector (global average pooled last stage)."""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        arch = ARCHITECTURES[spec.architecture]
        self.spec = spec
        w = arch.width
        if arch.stem == "imagenet":
            self.conv1 = nn.Conv2d(3, w, 7, 2, 3, bias=False)
            self.maxpool = nn.MaxPool2d(3, 2, 1)
        else:
            self.conv1 = nn.Conv2d(3, w, 3, 2, 1, bias=False)
            self.maxpool = nn.Identity()
        self.bn1 = nn.BatchNorm2d(w)
        in_ch = w
        for i, n in enumerate(arch.blocks):
            out_ch = w * 2 ** i
            blocks = [BasicBlock(in_ch, out_ch, 1 if i == 0 else 2)]
            blocks += [BasicBlock(out_ch, out_ch, 1) for _ in range(n - 1)]
            setattr(self, f"layer{i + 1}", nn.Sequential(*blocks))
            in_ch = out_ch
        self.feature_dim = in_ch
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def forward_maps(self, x):
        x = self.maxpool(F.relu(self.bn1(self.conv1(x))))
        return self.layer4(self.layer3(self.layer2(self.layer1(x))))

    def forward(self, x):
        return torch.flatten(F.adaptive_avg_pool2d(self.forward_maps(x), 1), 1)

    def conv_layers(self) -> list[tuple[str, nn.Conv2d]]:
        """Convolutions in forward order (a block's shortcut runs after its second conv)."""
        out = [("conv1", self.conv1)]
        for i in range(1, 5):
            for j, block in enumerate(getattr(self, f"layer{i}")):
                p = f"layer{i}.{j}"
                out += [(f"{p}.conv1", block.conv1), (f"{p}.conv2", block.conv2)]
                if block.downsample is not None:
                    out.append((f"{p}.downsample.0", block.downsample[0]))
        return out


def build_encoder(spec: EncoderSpec, init_seed: int) -> ResNetEncoder:
    if spec.architecture not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {spec.architecture!r}")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        return ResNetEncoder(spec)


# -- heads ------------------------------------------------------------------------

@dataclass(frozen=True)
class HeadSpec:
    """``linear``: classifier; ``projection``: Linear-ReLU-Linear; ``barlow``: 3-layer MLP with
    batch norm; ``puzzle``: linear over the concatenated features of ``tiles`` patches."""

    kind: Literal["linear", "projection", "barlow", "puzzle"]
    out_dim: int
    hidden: int | None = None
    in_dim: int | None = None
    tiles: int = 9

    def to_dict(self) -> dict:
        return asdict(self)


SIMCLR_HEAD = HeadSpec("projection", 128, hidden=512)
BARLOW_HEAD = HeadSpec("barlow", 8192, hidden=8192)


def _make_head(spec: HeadSpec, in_dim: int) -> nn.Module:
    if spec.kind == "linear" or spec.kind == "puzzle":
        return nn.Linear(in_dim, spec.out_dim)
    if spec.kind == "projection":
        hidden = spec.hidden or in_dim
        return nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, spec.out_dim))
    if spec.kind == "barlow":
        hidden = spec.hidden or spec.out_dim
        return nn.Sequential(
            nn.Linear(in_dim, hidden, bias=False), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, hidden, bias=False), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, spec.out_dim, bias=False),
        )
    raise ValueError(f"unknown head kind {spec.kind!r}")


class EncoderWithHead(nn.Module):
    def __init__(self, encoder: ResNetEncoder, head: nn.Module, head_spec: HeadSpec | None = None):
        super().__init__()
        self.encoder = encoder
        self.head = head
        self.head_spec = head_spec

    def features(self, x):
        return self.encoder(x)

    def forward(self, x):
        return self.head(self.encoder(x))


class PuzzleModel(EncoderWithHead):
    """Encodes ``B x tiles x C x H x W`` patch stacks and classifies the concatenated features."""

    def forward(self, x):
        b, t = x.shape[:2]
        feats = self.encoder(x.reshape(b * t, *x.shape[2:])).reshape(b, -1)
        return self.head(feats)


def _first_linear_in(module: nn.Module) -> int | None:
    for m in module.modules():
        if isinstance(m, nn.Linear):
            return m.in_features
    return None


def attach_head(encoder: ResNetEncoder, head: HeadSpec | nn.Module, init_seed: int | None = None) -> EncoderWithHead:
    """Compose ``encoder`` with a head; the encoder object is shared, not copied.

    With ``init_seed`` a head built from a :class:`HeadSpec` is initialised
    deterministically without touching the global generator.
    """
    puzzle = isinstance(head, HeadSpec) and head.kind == "puzzle"
    expected = encoder.feature_dim * (head.tiles if puzzle else 1)
    if isinstance(head, HeadSpec):
        if head.in_dim is not None and head.in_dim != expected:
            raise ValueError(f"head expects {head.in_dim}-d input, encoder gives {expected}")
        if init_seed is None:
            module = _make_head(head, expected)
        else:
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(init_seed)
                module = _make_head(head, expected)
        spec = head
    else:
        got = _first_linear_in(head)
        if got is not None and got != expected:
            raise ValueError(f"head expects {got}-d input, encoder gives {expected}")
        module, spec = head, None
    cls = PuzzleModel if puzzle else EncoderWithHead
    return cls(encoder, module, spec)


# -- checkpoints ------------------------------------------------------------------

@dataclass
class CheckpointMeta:
    task: str
    dataset: str
    epochs: int
    seed: int
    spec: EncoderSpec
    created: str = field(default_factory=lambda: _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"))
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["spec"] = self.spec.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CheckpointMeta":
        try:
            return cls(task=str(d["task"]), dataset=str(d["dataset"]), epochs=int(d["epochs"]), seed=int(d["seed"]),
                       spec=EncoderSpec(**d["spec"]), created=str(d.get("created", "")), extra=dict(d.get("extra", {})))
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"invalid checkpoint metadata: {exc}") from None

    def filename(self) -> str:
        return f"{self.task}_{self.dataset}_{self.seed}_{self.epochs}.ckpt"


@dataclass
class Checkpoint:
    state: dict[str, torch.Tensor]
    meta: CheckpointMeta

    def encoder_state(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state.items() if not k.startswith("head.")}

    def head_state(self) -> dict[str, torch.Tensor]:
        return {k[len("head."):]: v for k, v in self.state.items() if k.startswith("head.")}

    def build_encoder(self, spec: EncoderSpec | None = None) -> ResNetEncoder:
        enc = build_encoder(spec or self.meta.spec, init_seed=0)
        load_encoder_state(enc, self)
        return enc


def load_encoder_state(encoder: ResNetEncoder, ckpt: Checkpoint) -> None:
    if not encoder.spec.compatible(ckpt.meta.spec):
        raise CheckpointError(f"checkpoint spec {ckpt.meta.spec} does not match encoder spec {encoder.spec}")
    missing, unexpected = encoder.load_state_dict(ckpt.encoder_state(), strict=False)
    if missing or unexpected:
        raise CheckpointError(f"state mismatch: missing={missing} unexpected={unexpected}")


def _state_of(model: nn.Module) -> dict[str, torch.Tensor]:
    if isinstance(model, EncoderWithHead):
        state = {k: v for k, v in model.encoder.state_dict().items()}
        state.update({f"head.{k}": v for k, v in model.head.state_dict().items()})
    else:
        state = dict(model.state_dict())
    return {k: v.detach().cpu().contiguous().clone() for k, v in state.items()}


def checkpoint_from_model(model: nn.Module, meta: CheckpointMeta) -> Checkpoint:
    return Checkpoint(_state_of(model), meta)


def save_checkpoint(model: nn.Module | Checkpoint, meta: CheckpointMeta | None, path: str | Path) -> Path:
    """Write a single-file checkpoint; a directory ``path`` gets the canonical file name."""
    ckpt = model if isinstance(model, Checkpoint) else checkpoint_from_model(model, meta)
    path = Path(path)
    if path.is_dir():
        path = path / ckpt.meta.filename()
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format_version": str(CHECKPOINT_FORMAT_VERSION), "meta": json.dumps(ckpt.meta.to_dict(), sort_keys=True)}
    save_file(ckpt.state, str(path), metadata=header)
    return path


def load_checkpoint(path: str | Path, expected_spec: EncoderSpec | None = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        state = load_file(str(path))
        from safetensors import safe_open

        with safe_open(str(path), framework="pt") as fh:
            header = fh.metadata() or {}
    except (SafetensorError, OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from None
    if header.get("format_version") != str(CHECKPOINT_FORMAT_VERSION):
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')!r}")
    try:
        meta = CheckpointMeta.from_dict(json.loads(header["meta"]))
    except (KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable metadata ({exc})") from None
    if expected_spec is not None and not meta.spec.compatible(expected_spec):
        raise CheckpointError(f"{path}: checkpoint spec {meta.spec} does not match requested {expected_spec}")
    ckpt = Checkpoint(state, meta)
    # fail early if the tensors do not fit the declared architecture
    probe = ResNetEncoder(meta.spec)
    ref = probe.state_dict()
    enc_state = ckpt.encoder_state()
    if set(ref) != set(enc_state) or any(ref[k].shape != enc_state[k].shape for k in ref):
        raise CheckpointError(f"{path}: tensors do not match architecture {meta.spec.architecture}")
    return ckpt


EXTERNAL_PREFIXES = ("module.", "encoder_q.", "backbone.", "encoder.", "model.")


def import_external_state(state: Mapping[str, torch.Tensor], meta: CheckpointMeta,
                          prefixes: tuple[str, ...] = EXTERNAL_PREFIXES) -> Checkpoint:
    """Convert an externally trained encoder state into a checkpoint.

    Name mapping: leading wrapper prefixes (``module.``, ``encoder_q.``,
    ``backbone.``, ``encoder.``, ``model.``) are stripped repeatedly; the
    remaining names must be torchvision ResNet names. Classifier and projection
    entries (``fc.*``, ``head.*``, ``projector.*``) are dropped.
    """
    ref = ResNetEncoder(meta.spec).state_dict()
    out: dict[str, torch.Tensor] = {}
    for name, tensor in state.items():
        stripped = True
        while stripped:
            stripped = False
            for p in prefixes:
                if name.startswith(p):
                    name, stripped = name[len(p):], True
        if name.split(".")[0] in ("fc", "head", "projector"):
            continue
        out[name] = torch.as_tensor(tensor).detach().cpu().contiguous().clone()
    missing = sorted(set(ref) - set(out))
    extra = sorted(set(out) - set(ref))
    if missing or extra:
        raise CheckpointError(f"external state does not match {meta.spec.architecture}: missing={missing[:5]} "
                              f"unexpected={extra[:5]}")
    for k, v in ref.items():
        if out[k].shape != v.shape:
            raise CheckpointError(f"shape mismatch for {k}: {tuple(out[k].shape)} vs {tuple(v.shape)}")
        out[k] = out[k].to(v.dtype)
    return Checkpoint(out, meta)


# -- freeze policy ------------------------------------------------------------------

@dataclass(frozen=True)
class FreezePolicy:
    mode: Literal["plastic", "frozen"] = "plastic"

    def __post_init__(self):
        if self.mode not in ("plastic", "frozen"):
            raise ValueError(f"unknown freeze mode {self.mode!r}")


def _encoder_of(model: nn.Module) -> ResNetEncoder:
    if isinstance(model, ResNetEncoder):
        return model
    enc = getattr(model, "encoder", None)
    if isinstance(enc, ResNetEncoder):
        return enc
    raise ValueError("freeze policy needs a residual encoder (model.encoder)")


def apply_freeze(model: nn.Module, policy: FreezePolicy) -> nn.Module:
    """Plastic: everything trainable. Frozen: only the last two encoder convolutions
    (with their batch norms) and any head stay trainable."""
    for p in model.parameters():
        p.requires_grad_(True)
    model._frozen_norms = []
    if policy.mode == "plastic":
        return model
    enc = _encoder_of(model)
    last_block = getattr(enc, "layer4")[-1]
    keep = {id(p) for m in (last_block.conv1, last_block.bn1, last_block.conv2, last_block.bn2) for p in m.parameters()}
    for p in enc.parameters():
        if id(p) not in keep:
            p.requires_grad_(False)
    model._frozen_norms = [m for m in enc.modules()
                           if isinstance(m, nn.BatchNorm2d) and not any(p.requires_grad for p in m.parameters())]
    return model


def set_train_mode(model: nn.Module, training: bool = True) -> nn.Module:
    """``model.train(training)`` that keeps frozen batch norms on their running statistics."""
    model.train(training)
    for m in getattr(model, "_frozen_norms", []):
        m.eval()
    return model


def trainable_conv_count(model: nn.Module) -> int:
    return sum(1 for _, c in _encoder_of(model).conv_layers() if c.weight.requires_grad)
