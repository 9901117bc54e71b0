"""Config-driven pipeline: noise injection, pretraining, noisy-label training, difficulty and robustness scores."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import torch
import yaml

from nlbench import runtime
from nlbench.backbone import (Checkpoint, CheckpointMeta, EncoderSpec, import_external_state, load_checkpoint,
                              save_checkpoint)
from nlbench.dataman import (DatasetManifest, apply_grouping, load_grouping, load_manifest, merge_datasets,
                             save_manifest, subsample)
from nlbench.images import load_images, normalize
from nlbench.lnl import LNLConfig, train_lnl
from nlbench.metrics import (EmbeddingMatrix, RobustnessCurve, aggregate, difficulty_sweep, fisher_css,
                             robustness_score)
from nlbench.noise import NoiseSpec, build_matrix, inject
from nlbench.results import ResultsStore, RunRecord, aggregate_records, canonical_json
from nlbench.ssl import SSLTaskConfig, pretrain

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


@lru_cache(maxsize=1)
def config_schema() -> dict:
    return json.loads(resources.files("nlbench").joinpath("data/config_schema.json").read_text())


def _set_path(tree: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


def apply_overrides(tree: dict, assignments) -> dict:
    """Apply ``key.path=value`` strings; values are parsed as YAML scalars/lists."""
    tree = copy.deepcopy(tree)
    for item in assignments or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override {item!r}: {exc}") from None
        _set_path(tree, key.strip(), value)
    return tree


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment tree. ``raw`` is the serializable source of truth."""

    raw: dict = field(compare=True)

    @classmethod
    def from_dict(cls, tree: dict) -> "ExperimentConfig":
        try:
            jsonschema.validate(tree, config_schema())
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config invalid at {where}: {exc.message}") from None
        cfg = cls(copy.deepcopy(tree))
        cfg.lnl_config()  # surface bad LNL keys now
        cfg.noise_specs()
        p = cfg.pretrain
        if p["mode"] in ("checkpoint", "external") and not p.get("checkpoint"):
            raise ConfigError(f"pretrain mode {p['mode']!r} needs a checkpoint path")
        if p["mode"] == "ssl":
            if not p.get("task"):
                raise ConfigError("pretrain mode 'ssl' needs a task")
            cfg.ssl_config()
        return cfg

    @classmethod
    def load(cls, path: str | Path, overrides=()) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            tree = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(tree, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(apply_overrides(tree, overrides))

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def dump(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)

    @property
    def dataset(self) -> dict:
        return self.raw["dataset"]

    @property
    def pretrain(self) -> dict:
        return self.raw.get("pretrain") or {"mode": "none"}

    @property
    def seeds(self) -> list[int]:
        return list(self.raw.get("seeds") or [1, 2, 3])

    @property
    def output(self) -> Path:
        return Path(self.raw.get("output", "nlbench_out"))

    @property
    def single_threaded(self) -> bool:
        return bool(self.raw.get("single_threaded", False))

    def noise_rates(self) -> list[float | None]:
        noise = self.raw.get("noise")
        if not noise:
            return [None]
        if noise.get("sweep"):
            return [float(e) for e in noise["sweep"]]
        return [float(noise.get("epsilon", 0.0))]

    def noise_specs(self, class_names=None) -> list[NoiseSpec | None]:
        noise = self.raw.get("noise")
        out = []
        for eps in self.noise_rates():
            if eps is None:
                out.append(None)
                continue
            groups = noise.get("groups")
            if groups is not None and class_names is not None:
                groups = [[g if isinstance(g, int) else _class_index(class_names, g) for g in grp] for grp in groups]
            elif groups is not None:
                groups = [[g for g in grp if isinstance(g, int)] for grp in groups]
            try:
                out.append(NoiseSpec(noise["kind"], eps, groups, int(noise.get("seed", 0))))
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        return out

    def lnl_config(self, **kw) -> LNLConfig:
        tree = dict(self.raw.get("lnl") or {})
        tree.update(kw)
        profile = self.dataset.get("profile")
        try:
            if profile:
                return LNLConfig.for_profile(profile, **tree)
            return LNLConfig.from_dict(tree)
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"lnl: {exc}") from None

    def ssl_config(self) -> SSLTaskConfig:
        p = self.pretrain
        lnl = self.lnl_config()
        over = {"architecture": lnl.architecture}
        if p["task"] not in ("jigsaw", "jigmag"):
            over.update(input_size=lnl.input_size, image_size=lnl.input_size)
        over.update(p.get("overrides") or {})
        try:
            return SSLTaskConfig.defaults(p["task"], self.dataset.get("profile"), **over)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"pretrain: {exc}") from None

    def snapshot(self, epsilon: float | None, seed: int) -> dict:
        """Effective config of one run: a single noise rate and a single seed."""
        tree = self.to_dict()
        if tree.get("noise"):
            tree["noise"].pop("sweep", None)
            tree["noise"]["epsilon"] = epsilon
        tree["seeds"] = [int(seed)]
        return tree


def _class_index(class_names, name: str) -> int:
    try:
        return list(class_names).index(name)
    except ValueError:
        raise ConfigError(f"unknown class {name!r} in noise groups") from None


def prepare_manifest(cfg: ExperimentConfig) -> DatasetManifest:
    d = cfg.dataset
    manifest = load_manifest(d["manifest"])
    if d.get("grouping"):
        manifest = apply_grouping(manifest, load_grouping(d["grouping"], manifest.class_names))
    if d.get("subsample"):
        s = d["subsample"]
        manifest = subsample(manifest, int(s["n"]), int(s.get("seed", 0)))[0]
    return manifest


def noisy_manifest(manifest: DatasetManifest, spec: NoiseSpec | None, profile: str | None = None):
    """Manifest with observed labels drawn from ``spec``, plus the transition matrix used."""
    if spec is None:
        return manifest, None
    if spec.kind == "class_dependent" and spec.groups is None:
        if not profile:
            raise ConfigError("class-dependent noise needs groups (or a dataset profile)")
        from nlbench.presets import profile as get_profile

        spec = NoiseSpec(spec.kind, spec.epsilon, get_profile(profile).dependency_index_groups(), spec.seed)
    matrix = build_matrix(spec, manifest.num_classes)
    noisy = inject(manifest.labels("train"), matrix, spec.seed, spec)
    return manifest.with_observed(noisy.observed), matrix


def cmd_inject(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> list[Path]:
    """One noisy manifest (with an ``observed_label`` column) and matrix text file per noise rate."""
    manifest = prepare_manifest(cfg)
    out_dir = Path(out_dir or cfg.output)
    paths = []
    for spec in cfg.noise_specs(manifest.class_names):
        if spec is None:
            spec = NoiseSpec("symmetric", 0.0)
        noisy, matrix = noisy_manifest(manifest, spec, cfg.dataset.get("profile"))
        stem = f"{manifest.name}_{spec.kind}_{spec.epsilon:g}_seed{spec.seed}"
        paths.append(save_manifest(noisy, out_dir / f"{stem}.csv"))
        (out_dir / f"{stem}_matrix.csv").write_text(matrix.to_text(manifest.class_names))
    return paths


def _ssl_checkpoint(cfg: ExperimentConfig, manifest: DatasetManifest,
                    base: Checkpoint | None) -> tuple[Checkpoint, Path]:
    """Pretrain once per (task config, dataset, base weights); later calls reuse the cached file."""
    ssl_cfg = cfg.ssl_config()
    seed = int(cfg.pretrain.get("seed", 0))
    spec = EncoderSpec.for_architecture(ssl_cfg.architecture, ssl_cfg.input_size)
    key = canonical_json({"ssl": ssl_cfg.to_dict(), "dataset": cfg.dataset, "init": cfg.pretrain.get("checkpoint")})
    tag = hashlib.sha256(key.encode()).hexdigest()[:12]
    directory = cfg.output / "checkpoints" / tag
    meta_name = CheckpointMeta(ssl_cfg.task, manifest.name, ssl_cfg.epochs, seed, spec).filename()
    path = directory / meta_name
    if path.is_file():
        return load_checkpoint(path), path
    ckpt = pretrain(ssl_cfg, manifest, seed, dataset=manifest.name, single_threaded=cfg.single_threaded, init=base)
    directory.mkdir(parents=True, exist_ok=True)
    return ckpt, save_checkpoint(ckpt, ckpt.meta, path)


def _external(path: str, spec: EncoderSpec) -> Checkpoint:
    state = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    return import_external_state(state, CheckpointMeta("external", Path(path).stem, 0, 0, spec))


def _base_for_ssl(cfg: ExperimentConfig) -> Checkpoint | None:
    p = cfg.pretrain
    if not p.get("checkpoint"):
        return None
    lnl = cfg.lnl_config()
    spec = EncoderSpec.for_architecture(lnl.architecture, lnl.input_size)
    if str(p["checkpoint"]).endswith(".ckpt"):
        return load_checkpoint(p["checkpoint"], expected_spec=spec)
    return _external(p["checkpoint"], spec)


def cmd_pretrain(cfg: ExperimentConfig) -> Path:
    """Run (or reuse) the configured self-supervised pretraining; returns the checkpoint path."""
    if cfg.pretrain["mode"] != "ssl":
        raise ConfigError("pretrain needs pretrain.mode: ssl")
    return _ssl_checkpoint(cfg, prepare_manifest(cfg), _base_for_ssl(cfg))[1]


def resolve_init(cfg: ExperimentConfig, manifest: DatasetManifest) -> Checkpoint | None:
    p = cfg.pretrain
    lnl = cfg.lnl_config()
    spec = EncoderSpec.for_architecture(lnl.architecture, lnl.input_size)
    if p["mode"] == "none":
        return None
    if p["mode"] == "checkpoint":
        return load_checkpoint(p["checkpoint"], expected_spec=spec)
    if p["mode"] == "external":
        return _external(p["checkpoint"], spec)
    return _ssl_checkpoint(cfg, manifest, _base_for_ssl(cfg))[0]


def run_single(cfg: ExperimentConfig, epsilon: float | None, seed: int, manifest: DatasetManifest | None = None,
               init: Checkpoint | None | str = "resolve") -> RunRecord:
    """Train one (noise rate, seed) pair and wrap the result in a RunRecord."""
    if cfg.single_threaded:
        runtime.set_single_threaded()
    manifest = manifest if manifest is not None else prepare_manifest(cfg)
    if init == "resolve":
        init = resolve_init(cfg, manifest)
    spec = None
    if epsilon is not None:
        spec = next(s for s in cfg.noise_specs(manifest.class_names) if s is not None and s.epsilon == epsilon)
    noisy, _ = noisy_manifest(manifest, spec, cfg.dataset.get("profile"))
    lnl = cfg.lnl_config(seed=int(seed))
    if spec is not None:
        lnl = lnl.with_overrides(noise_kind=spec.kind, noise_rate=spec.epsilon)
    start = time.time()
    _, report = train_lnl(lnl, noisy, init=init)
    report.meta.update(freeze_policy=lnl.freeze, noise=None if spec is None else spec.to_dict(),
                       dataset=manifest.name, pretrain=dict(cfg.pretrain))
    return RunRecord.create(cfg.snapshot(epsilon, seed), seed, report, time.time() - start)


def cmd_train(cfg: ExperimentConfig, store: ResultsStore) -> list[dict]:
    """All seeds for every noise rate; writes one RunRecord per run and one aggregate row per rate."""
    manifest = prepare_manifest(cfg)
    init = resolve_init(cfg, manifest)
    rows = []
    for eps in cfg.noise_rates():
        records = []
        for seed in cfg.seeds:
            rec = run_single(cfg, eps, seed, manifest, init)
            store.write(rec)
            records.append(rec)
            log.info("run %s seed %d best %.4f last %.4f", rec.run_id, seed, rec.best, rec.last)
        row = aggregate_records(records)
        row.update(epsilon=eps, dataset=manifest.name, method=cfg.lnl_config().method, pretrain=dict(cfg.pretrain))
        name = "agg_" + "_".join(sorted(row["run_ids"]))[:64]
        store.write_aggregate(name, row)
        rows.append(row)
    return rows


def rerun(record: RunRecord) -> RunRecord:
    """Re-execute a stored run single-threaded from its config snapshot."""
    tree = copy.deepcopy(record.config)
    tree["single_threaded"] = True
    cfg = ExperimentConfig.from_dict(tree)
    eps = (tree.get("noise") or {}).get("epsilon")
    return run_single(cfg, eps, record.seed)


@torch.no_grad()
def embed(encoder: torch.nn.Module, images: torch.Tensor, batch_size: int = 256) -> np.ndarray:
    encoder.eval()
    return torch.cat([encoder(normalize(images[i:i + batch_size])) for i in range(0, len(images), batch_size)]).numpy()


def cmd_difficulty(cfg: ExperimentConfig) -> dict:
    """Difficulty sweep (test macro-F1 vs class count or train size) and optional joint-space separability."""
    d = cfg.raw.get("difficulty")
    if not d or not d.get("datasets"):
        raise ConfigError("difficulty section with datasets is required")
    manifests = {name: load_manifest(path) for name, path in d["datasets"].items()}
    groupings = {name: {int(k): load_grouping(p, manifests[name].class_names) for k, p in g.items()}
                 for name, g in (d.get("groupings") or {}).items()}
    size_grouping = {name: load_grouping(p, manifests[name].class_names)
                     for name, p in (d.get("size_grouping") or {}).items()}
    lnl = cfg.lnl_config(method="ce")

    def train_fn(fold: DatasetManifest) -> float:
        return train_lnl(lnl, fold)[1].last

    out = {}
    if d.get("axis"):
        table = difficulty_sweep(manifests, train_fn, d["axis"], d.get("values"), groupings, n=d.get("n", 7000),
                                 num_folds=d.get("folds", 6), seed=d.get("seed", 0), size_grouping=size_grouping)
        out["sweep"] = table.to_dict()
    if d.get("css"):
        out["css"] = joint_separability(manifests, lnl.with_overrides(epochs=d.get("css_epochs", lnl.epochs)))
    return out


def joint_separability(manifests: dict[str, DatasetManifest], lnl: LNLConfig) -> dict:
    """Fine-tune one encoder on the merged class space with class-weighted CE, then score each dataset's test
    embeddings with the Fisher ratio."""
    named = {name: m if m.name == name else _renamed(m, name) for name, m in manifests.items()}
    merged = merge_datasets(list(named.values()))
    model, report = train_lnl(lnl.with_overrides(method="ce", class_weighting=True), merged)
    out = {}
    for name, m in named.items():
        images = load_images([str(m.resolve(r.path)) for r in m.test], lnl.input_size)
        value = fisher_css(EmbeddingMatrix(embed(model.encoder, images), m.labels("test")))
        out[name] = {"css": value.value, "flagged": value.flagged}
    out["_joint_last_f1"] = report.last
    return out


def _renamed(m: DatasetManifest, name: str) -> DatasetManifest:
    return replace(m, name=name)


def _group_key(rec: RunRecord) -> tuple:
    c = rec.config
    noise = c.get("noise") or {}
    pre = c.get("pretrain") or {"mode": "none"}
    lnl = c.get("lnl") or {}
    return (rec.report.meta.get("dataset", Path(c["dataset"]["manifest"]).stem), lnl.get("method", "ce"),
            pre.get("mode"), pre.get("task"), lnl.get("freeze", "plastic"), noise.get("kind", "symmetric"))


def group_by_noise(records) -> dict[tuple, dict[float, list[RunRecord]]]:
    groups: dict[tuple, dict[float, list[RunRecord]]] = {}
    for r in records:
        eps = float(((r.config.get("noise") or {}).get("epsilon")) or 0.0)
        groups.setdefault(_group_key(r), {}).setdefault(eps, []).append(r)
    return groups


def cmd_robustness(records, metric: str = "last", max_rate: float | None = None) -> list[dict]:
    """Robustness score per (dataset, method, pretraining, freeze, noise kind) from mean metric over seeds."""
    rows = []
    for key, by_eps in sorted(group_by_noise(records).items(), key=lambda kv: str(kv[0])):
        points = tuple((e, aggregate(getattr(r, metric) for r in rs)["mean"]) for e, rs in sorted(by_eps.items()))
        row = dict(zip(("dataset", "method", "pretrain", "task", "freeze", "noise_kind"), key))
        row["points"] = [list(p) for p in points]
        try:
            curve = RobustnessCurve(points)
            if max_rate is not None:
                curve = curve.restrict(max_rate)
            score = robustness_score(curve)
            row.update(score=score.value, flagged=score.flagged)
        except ValueError as exc:
            row.update(score=None, flagged=True, reason=str(exc))
        rows.append(row)
    return rows
