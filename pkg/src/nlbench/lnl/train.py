"""Training loops: cross-entropy, Co-teaching and DivideMix, with per-epoch test evaluation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from nlbench import runtime
from nlbench.backbone import (Checkpoint, CheckpointError, EncoderSpec, EncoderWithHead, FreezePolicy, HeadSpec,
                              apply_freeze, attach_head, build_encoder, load_encoder_state, set_train_mode)
from nlbench.dataman import DatasetManifest, class_weights
from nlbench.images import batches, load_images, normalize, weak_augment
from nlbench.lnl.config import LNLConfig
from nlbench.lnl.dividemix import CleanSplit, dm_split, mixup_lambda, sharpen
from nlbench.lnl.selection import coteach_select, forget_rate_schedule
from nlbench.metrics import MetricReport, aggregate, evaluate_predictions, track
from nlbench.rng import derive_seed

log = logging.getLogger(__name__)

_SEED_MASK = 0x7FFFFFFF
_AUG_TAG = 100


@dataclass
class LNLData:
    """Decoded images with observed (possibly noisy) train labels and clean test labels."""

    train_images: torch.Tensor
    observed: np.ndarray
    test_images: torch.Tensor
    test_labels: np.ndarray
    num_classes: int
    # clean train labels, used only for diagnostics that never feed back into training
    clean: np.ndarray | None = None

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, input_size: int) -> "LNLData":
        train, test = manifest.train, manifest.test
        if not train or not test:
            raise ValueError("manifest needs non-empty train and test splits")
        return cls(
            train_images=load_images([str(manifest.resolve(r.path)) for r in train], input_size),
            observed=manifest.labels("train", observed=True),
            test_images=load_images([str(manifest.resolve(r.path)) for r in test], input_size),
            test_labels=manifest.labels("test"),
            num_classes=manifest.num_classes,
            clean=manifest.labels("train"),
        )

    @property
    def n(self) -> int:
        return len(self.observed)


class PeerEnsemble(nn.Module):
    """Averages the softmax outputs of two peers; returns log-probabilities."""

    def __init__(self, a: nn.Module, b: nn.Module):
        super().__init__()
        self.a, self.b = a, b

    def forward(self, x):
        return torch.log((F.softmax(self.a(x), 1) + F.softmax(self.b(x), 1)) / 2)


def build_model(cfg: LNLConfig, num_classes: int, init: Checkpoint | None, peer: int) -> EncoderWithHead:
    spec = EncoderSpec.for_architecture(cfg.architecture, cfg.input_size)
    encoder = build_encoder(spec, derive_seed(cfg.seed, 11, peer) & _SEED_MASK)
    if init is not None:
        if not spec.compatible(init.meta.spec):
            raise CheckpointError(f"initial checkpoint {init.meta.spec} does not match {spec}")
        load_encoder_state(encoder, init)
    model = attach_head(encoder, HeadSpec("linear", num_classes), init_seed=derive_seed(cfg.seed, 12, peer) & _SEED_MASK)
    return apply_freeze(model, FreezePolicy(cfg.freeze))


def make_optimizer(model: nn.Module, cfg: LNLConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.SGD(params, lr=cfg.learning_rate, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


@torch.no_grad()
def predict_proba(models, images: torch.Tensor, batch_size: int) -> torch.Tensor:
    """Mean softmax over ``models`` for every image (inference mode)."""
    models = list(models)
    states = [m.training for m in models]
    for m in models:
        m.eval()
    out = []
    for start in range(0, len(images), batch_size):
        x = normalize(images[start:start + batch_size])
        out.append(sum(F.softmax(m(x), dim=1) for m in models) / len(models))
    for m, s in zip(models, states):
        set_train_mode(m, s)
    return torch.cat(out)


def _weights_tensor(cfg: LNLConfig, data: LNLData) -> torch.Tensor | None:
    if not cfg.class_weighting:
        return None
    counts = np.bincount(data.observed, minlength=data.num_classes)
    return torch.tensor(class_weights(np.maximum(counts, 1)).weights, dtype=torch.float32)


def _ce_pass(model, optimizer, data: LNLData, cfg: LNLConfig, epoch: int, order_seed: int, aug_tag: int,
             weight: torch.Tensor | None = None) -> float:
    set_train_mode(model)
    total, count = 0.0, 0
    drop_last = data.n > cfg.resolved_batch_size
    for idx in batches(data.n, cfg.resolved_batch_size, order_seed, epoch, drop_last):
        if len(idx) < 2:
            continue
        x = weak_augment(data.train_images[idx], idx, order_seed, epoch, tag=aug_tag)
        y = torch.as_tensor(data.observed[idx])
        loss = F.cross_entropy(model(x), y, weight=weight)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        total += float(loss.detach()) * len(idx)
        count += len(idx)
    return total / max(count, 1)


def warmup(models, optimizers, data: LNLData, cfg: LNLConfig, epochs: int = 10, start_epoch: int = 0,
           on_epoch=None) -> list[list[float]]:
    """Plain cross-entropy on every sample for each model, each with its own batch order.

    Returns per-epoch mean losses, one list per model.
    """
    if epochs < 0:
        raise ValueError("warm-up epochs must be >= 0")
    weight = _weights_tensor(cfg, data)
    history = [[] for _ in models]
    for e in range(start_epoch, start_epoch + epochs):
        for k, (m, opt) in enumerate(zip(models, optimizers)):
            seed_k = derive_seed(cfg.seed, 21, k) & _SEED_MASK
            history[k].append(_ce_pass(m, opt, data, cfg, e, seed_k, _AUG_TAG + k, weight))
        if on_epoch is not None:
            on_epoch(e, {"phase": "warmup", "train_loss": [h[-1] for h in history]})
    return history


def exchange_losses(loss_a: torch.Tensor, loss_b: torch.Tensor, keep_rate: float,
                    weight: torch.Tensor | None = None):
    """Each peer's update loss averaged over the samples the *other* peer kept as small-loss.

    Returns ``(update_a, update_b, kept_by_a, kept_by_b)``.
    """
    keep_a = torch.as_tensor(coteach_select(loss_a.detach().numpy(), keep_rate).kept_indices)
    keep_b = torch.as_tensor(coteach_select(loss_b.detach().numpy(), keep_rate).kept_indices)
    w = weight if weight is not None else torch.ones(len(loss_a))
    update_a = (loss_a[keep_b] * w[keep_b]).sum() / w[keep_b].sum()
    update_b = (loss_b[keep_a] * w[keep_a]).sum() / w[keep_a].sum()
    return update_a, update_b, keep_a, keep_b


def coteach_epoch(model_a, model_b, opt_a, opt_b, data: LNLData, cfg: LNLConfig, epoch: int, keep_rate: float) -> dict:
    """One epoch of peer small-loss exchange: A learns from B's kept samples and B from A's."""
    set_train_mode(model_a)
    set_train_mode(model_b)
    weight = _weights_tensor(cfg, data)
    order_seed = derive_seed(cfg.seed, 22) & _SEED_MASK
    kept_total = kept_clean = 0
    loss_sum, count = 0.0, 0
    drop_last = data.n > cfg.resolved_batch_size
    for idx in batches(data.n, cfg.resolved_batch_size, order_seed, epoch, drop_last):
        if len(idx) < 2:
            continue
        x = weak_augment(data.train_images[idx], idx, order_seed, epoch, tag=_AUG_TAG)
        y = torch.as_tensor(data.observed[idx])
        loss_a = F.cross_entropy(model_a(x), y, reduction="none")
        loss_b = F.cross_entropy(model_b(x), y, reduction="none")
        w = weight[y] if weight is not None else None
        update_a, update_b, keep_a, keep_b = exchange_losses(loss_a, loss_b, keep_rate, w)
        opt_a.zero_grad(set_to_none=True)
        opt_b.zero_grad(set_to_none=True)
        (update_a + update_b).backward()
        opt_a.step()
        opt_b.step()
        loss_sum += float(update_a.detach()) * len(idx)
        count += len(idx)
        if data.clean is not None:
            for keep in (keep_a, keep_b):
                sel = idx[keep.numpy()]
                kept_total += len(sel)
                kept_clean += int((data.clean[sel] == data.observed[sel]).sum())
    stats = {"train_loss": loss_sum / max(count, 1), "keep_rate": keep_rate}
    if kept_total:
        stats["kept_clean_fraction"] = kept_clean / kept_total
    return stats


@torch.no_grad()
def per_sample_losses(model, data: LNLData, batch_size: int) -> np.ndarray:
    probs = predict_proba([model], data.train_images, batch_size)
    picked = probs[torch.arange(len(probs)), torch.as_tensor(data.observed)]
    return (-torch.log(picked.clamp_min(1e-12))).numpy().astype(np.float64)


def _views(data: LNLData, idx: np.ndarray, seed: int, epoch: int, tag: int, m: int) -> list[torch.Tensor]:
    return [weak_augment(data.train_images[idx], idx, seed, epoch, tag=tag + j) for j in range(m)]


def refine_labels(onehot: torch.Tensor, clean_prob: torch.Tensor, pred: torch.Tensor, temperature: float):
    """Blend observed labels with the model's prediction by clean probability, then sharpen."""
    return sharpen(clean_prob * onehot + (1 - clean_prob) * pred, temperature)


def guess_labels(probs, temperature: float):
    """Average a list of softmax outputs and sharpen the mean."""
    return sharpen(sum(probs) / len(probs), temperature)


def dm_loss(logits: torch.Tensor, targets: torch.Tensor, n_labeled: int, lambda_u: float):
    """Soft cross-entropy on the first ``n_labeled`` rows, ``lambda_u`` * squared error on the rest,
    plus KL(uniform || mean prediction). Returns ``(total, lx, lu, penalty)``."""
    probs = F.softmax(logits, 1)
    zero = logits.sum() * 0
    lx = -(F.log_softmax(logits[:n_labeled], 1) * targets[:n_labeled]).sum(1).mean() if n_labeled else zero
    lu = (probs[n_labeled:] - targets[n_labeled:]).pow(2).mean() if len(logits) > n_labeled else zero
    prior = torch.full((logits.shape[1],), 1.0 / logits.shape[1])
    penalty = (prior * torch.log(prior / probs.mean(0))).sum()
    return lx + lambda_u * lu + penalty, lx, lu, penalty


def dm_epoch(model, peer, optimizer, split: CleanSplit, data: LNLData, cfg: LNLConfig, epoch: int, model_id: int) -> dict:
    """One refinement epoch for ``model`` using the clean/noisy split derived from ``peer``'s losses.

    Labeled targets blend the observed label with the model's averaged
    prediction (weighted by the clean probability) and are sharpened;
    unlabeled targets average both models' predictions and are sharpened.
    Inputs and targets are mixed with ``max(l, 1 - l)``, ``l ~ Beta(alpha, alpha)``.
    Loss: cross-entropy on labeled + lambda_u * squared error on unlabeled
    + KL(uniform prior || mean prediction).
    """
    set_train_mode(model)
    peer.eval()
    c, m = data.num_classes, cfg.augmentations
    bs = cfg.resolved_batch_size
    lambda_u = cfg.resolved_lambda_u
    labeled, unlabeled = split.clean_indices, split.noisy_indices
    seed = derive_seed(cfg.seed, 31, model_id) & _SEED_MASK
    rng = np.random.default_rng(derive_seed(cfg.seed, 32, model_id, epoch))
    all_unlabeled = len(labeled) == 0
    base = unlabeled if all_unlabeled else labeled
    lab_order = base[np.argsort(rng.random(len(base)), kind="stable")]
    unl_order = unlabeled[np.argsort(rng.random(len(unlabeled)), kind="stable")] if len(unlabeled) else unlabeled
    steps = max(1, math.ceil(len(base) / bs))
    tag_x, tag_u = _AUG_TAG + 10 + 4 * model_id, _AUG_TAG + 12 + 4 * model_id
    sums = {"loss": 0.0, "lx": 0.0, "lu": 0.0, "penalty": 0.0}
    for step in range(steps):
        xs = []
        targets = []
        n_x = 0
        with torch.no_grad():
            if not all_unlabeled:
                ix = lab_order[step * bs:(step + 1) * bs]
                vx = _views(data, ix, seed, epoch, tag_x, m)
                y = F.one_hot(torch.as_tensor(data.observed[ix]), c).float()
                w = torch.as_tensor(split.clean_prob[ix], dtype=torch.float32).view(-1, 1)
                px = sum(F.softmax(model(v), 1) for v in vx) / m
                tx = refine_labels(y, w, px, cfg.temperature)
                xs += vx
                targets += [tx] * m
                n_x = len(ix) * m
            if len(unl_order):
                bu = bs
                start = (step * bu) % len(unl_order)
                iu = np.take(unl_order, np.arange(start, start + min(bu, len(unl_order))), mode="wrap")
                vu = _views(data, iu, seed, epoch * 1000 + step, tag_u, m)
                tu = guess_labels([F.softmax(net(v), 1) for v in vu for net in (model, peer)], cfg.temperature)
                xs += vu
                targets += [tu] * m
        inputs, target = torch.cat(xs), torch.cat(targets)
        if len(inputs) < 2:
            continue
        lam = float(mixup_lambda(cfg.alpha, rng))
        perm = torch.as_tensor(rng.permutation(len(inputs)))
        mixed_x = lam * inputs + (1 - lam) * inputs[perm]
        mixed_t = lam * target + (1 - lam) * target[perm]
        loss, lx, lu, penalty = dm_loss(model(mixed_x), mixed_t, n_x, lambda_u)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        for k, v in (("loss", loss), ("lx", lx), ("lu", lu), ("penalty", penalty)):
            sums[k] += float(v.detach())
    stats = {k: v / steps for k, v in sums.items()}
    stats.update(clean_set_size=int(len(labeled)), all_unlabeled=all_unlabeled, lambda_u=lambda_u,
                 degenerate_split=split.degenerate)
    if data.clean is not None and len(labeled):
        stats["clean_set_precision"] = float((data.clean[labeled] == data.observed[labeled]).mean())
    return stats


def _evaluate(models, data: LNLData, cfg: LNLConfig, epoch: int, **extras):
    probs = predict_proba(models, data.test_images, cfg.eval_batch_size)
    preds = probs.argmax(1).numpy()
    return evaluate_predictions(epoch, preds, data.test_labels, data.num_classes, **extras)


def train_lnl(cfg: LNLConfig, manifest: DatasetManifest | LNLData, init: Checkpoint | None = None,
              single_threaded: bool = False, on_epoch=None) -> tuple[nn.Module, MetricReport]:
    """Train with ``cfg.method`` on the manifest's observed labels; evaluate on the test split every epoch.

    Co-teaching and DivideMix run ``warmup_epochs`` of plain cross-entropy
    first (counted in ``epochs``). Co-teaching reports the first peer;
    DivideMix reports the two-peer ensemble.
    """
    if single_threaded:
        runtime.set_single_threaded()
    data = manifest if isinstance(manifest, LNLData) else LNLData.from_manifest(manifest, cfg.input_size)
    start = time.time()
    report = MetricReport(meta={"method": cfg.method, "config": cfg.to_dict(), "tau": cfg.resolved_tau,
                                "lambda_u": cfg.resolved_lambda_u, "batch_size": cfg.resolved_batch_size,
                                "init": None if init is None else
                                {"task": init.meta.task, "dataset": init.meta.dataset, "epochs": init.meta.epochs,
                                 "seed": init.meta.seed}})

    def record(epoch, models, **extras):
        entry = _evaluate(models, data, cfg, epoch, **extras)
        track(report, entry)
        log.info("%s epoch %d/%d macro-F1 %.4f", cfg.method, epoch + 1, cfg.epochs, entry.macro_f1)
        if on_epoch is not None:
            on_epoch(entry)

    if cfg.method == "ce":
        model = build_model(cfg, data.num_classes, init, 0)
        opt = make_optimizer(model, cfg)
        weight = _weights_tensor(cfg, data)
        seed0 = derive_seed(cfg.seed, 21, 0) & _SEED_MASK
        for epoch in range(cfg.epochs):
            loss = _ce_pass(model, opt, data, cfg, epoch, seed0, _AUG_TAG, weight)
            record(epoch, [model], phase="ce", train_loss=loss)
        result = model
    else:
        model_a = build_model(cfg, data.num_classes, init, 0)
        model_b = build_model(cfg, data.num_classes, init, 1)
        opt_a, opt_b = make_optimizer(model_a, cfg), make_optimizer(model_b, cfg)
        eval_models = [model_a] if cfg.method == "coteaching" else [model_a, model_b]
        n_warm = min(cfg.warmup_epochs, cfg.epochs)
        for epoch in range(n_warm):
            losses = warmup([model_a, model_b], [opt_a, opt_b], data, cfg, epochs=1, start_epoch=epoch)
            record(epoch, eval_models, phase="warmup", train_loss=[h[0] for h in losses])
        for epoch in range(n_warm, cfg.epochs):
            if cfg.method == "coteaching":
                keep = forget_rate_schedule(epoch, cfg.resolved_tau, cfg.t_k, cfg.c_exp)
                stats = coteach_epoch(model_a, model_b, opt_a, opt_b, data, cfg, epoch, keep)
            else:
                split_for_a = dm_split(per_sample_losses(model_b, data, cfg.eval_batch_size), cfg.p_threshold)
                split_for_b = dm_split(per_sample_losses(model_a, data, cfg.eval_batch_size), cfg.p_threshold)
                sa = dm_epoch(model_a, model_b, opt_a, split_for_a, data, cfg, epoch, 0)
                sb = dm_epoch(model_b, model_a, opt_b, split_for_b, data, cfg, epoch, 1)
                stats = {"train_loss": [sa["loss"], sb["loss"]], "peer_a": sa, "peer_b": sb}
            record(epoch, eval_models, phase=cfg.method, **stats)
        result = model_a if cfg.method == "coteaching" else PeerEnsemble(model_a, model_b)
    report.meta["wall_clock"] = time.time() - start
    return result, report


def train_seeds(cfg: LNLConfig, manifest: DatasetManifest | LNLData, seeds, init_for_seed=None) -> dict:
    """Repeat :func:`train_lnl` over ``seeds``; returns the reports with BEST/LAST mean and std."""
    data = manifest if isinstance(manifest, LNLData) else LNLData.from_manifest(manifest, cfg.input_size)
    reports = []
    for s in seeds:
        init = init_for_seed(s) if init_for_seed is not None else None
        reports.append(train_lnl(cfg.with_overrides(seed=s), data, init)[1])
    return {"reports": reports, "best": aggregate(r.best for r in reports), "last": aggregate(r.last for r in reports)}
