"""Label-free pretraining loop producing encoder checkpoints."""
from __future__ import annotations

import copy
import logging
import time

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from nlbench import runtime
from nlbench.backbone import (Checkpoint, CheckpointMeta, EncoderSpec, HeadSpec, attach_head, build_encoder,
                              checkpoint_from_model, load_encoder_state)
from nlbench.dataman import DatasetManifest, UnlabeledView
from nlbench.images import batches, contrastive_views, epoch_order, load_images, normalize, to_float
from nlbench.rng import derive_seed
from nlbench.ssl.config import SSLTaskConfig
from nlbench.ssl.lars import LARS
from nlbench.ssl.losses import barlow_loss, ntxent_loss
from nlbench.ssl.moco import MomentumQueue, moco_step
from nlbench.ssl.pretext import generate_permutation_set, jigmag_batch, jigsaw_batch, rotation_batch
from nlbench.ssl.vae import VAE, check_beta, dump_samples, vae_loss

log = logging.getLogger(__name__)

_SEED_MASK = 0x7FFFFFFF


class _Task:
    def __init__(self, cfg: SSLTaskConfig, encoder, seed: int):
        self.cfg, self.seed = cfg, seed
        self.model = self.build(encoder)

    def build(self, encoder) -> nn.Module:
        raise NotImplementedError

    def loss(self, x: torch.Tensor, idx: np.ndarray, epoch: int, step: int) -> torch.Tensor:
        raise NotImplementedError

    def export(self) -> nn.Module:
        return self.model


class _Rotation(_Task):
    def build(self, encoder):
        return attach_head(encoder, HeadSpec("linear", 4))

    def loss(self, x, idx, epoch, step):
        xb, y = rotation_batch(x, idx, self.seed, epoch)
        return F.cross_entropy(self.model(xb), y)


class _Puzzle(_Task):
    def build(self, encoder):
        offset = 0 if self.cfg.task == "jigsaw" else 1  # separate permutation sets per task
        self.perms = generate_permutation_set(self.cfg.num_permutations, self.cfg.permutation_seed + offset)
        self.make = jigsaw_batch if self.cfg.task == "jigsaw" else jigmag_batch
        return attach_head(encoder, HeadSpec("puzzle", self.cfg.num_permutations))

    def loss(self, x, idx, epoch, step):
        xb, y = self.make(x, self.perms, idx, self.seed, epoch, patch_size=self.cfg.input_size)
        return F.cross_entropy(self.model(xb), y)


class _SimCLR(_Task):
    def build(self, encoder):
        return attach_head(encoder, HeadSpec("projection", self.cfg.projection_dim, hidden=encoder.feature_dim))

    def loss(self, x, idx, epoch, step):
        v1, v2 = contrastive_views(x, idx, self.seed, epoch, self.cfg.color_strength)
        return ntxent_loss(self.model(torch.cat([v1, v2])), self.cfg.temperature)


class _Barlow(_Task):
    def build(self, encoder):
        return attach_head(encoder, HeadSpec("barlow", self.cfg.barlow_dim, hidden=self.cfg.barlow_dim))

    def loss(self, x, idx, epoch, step):
        v1, v2 = contrastive_views(x, idx, self.seed, epoch, self.cfg.color_strength)
        return barlow_loss(self.model(v1), self.model(v2), self.cfg.lambda_off)


class _MoCo(_Task):
    def build(self, encoder):
        query = attach_head(encoder, HeadSpec("projection", self.cfg.projection_dim, hidden=encoder.feature_dim))
        self.key = copy.deepcopy(query)
        for p in self.key.parameters():
            p.requires_grad_(False)
        self.queue = MomentumQueue(self.cfg.queue_size, self.cfg.projection_dim,
                                   generator=runtime.generator(derive_seed(self.seed, 7)))
        return query

    def loss(self, x, idx, epoch, step):
        v1, v2 = contrastive_views(x, idx, self.seed, epoch, self.cfg.color_strength)
        self.key.train(self.model.training)
        loss, self.queue = moco_step(self.model, self.key, self.queue, (v1, v2), self.cfg.temperature,
                                     self.cfg.momentum, self.cfg.moco_bn_splits,
                                     runtime.generator(derive_seed(self.seed, epoch, step)))
        return loss


class _VAE(_Task):
    def build(self, encoder):
        check_beta(self.cfg.beta, self.cfg.allow_nonpositive_beta)
        return VAE(encoder, self.cfg.latent_dim)

    def loss(self, x, idx, epoch, step):
        g = runtime.generator(derive_seed(self.seed, epoch, step))
        return vae_loss(self.model, normalize(x), to_float(x), self.cfg.beta, g)[0]

    @torch.no_grad()
    def validation_reconstruction(self, x: torch.Tensor, epoch: int) -> float:
        self.model.eval()
        g = runtime.generator(derive_seed(self.seed, epoch, -1))
        _, rec, _ = vae_loss(self.model, normalize(x), to_float(x), self.cfg.beta, g)
        self.model.train()
        return float(rec)

    def export(self):
        return self.model.encoder


_TASKS = {"rotation": _Rotation, "jigsaw": _Puzzle, "jigmag": _Puzzle, "simclr": _SimCLR, "barlow": _Barlow,
          "moco": _MoCo, "vae": _VAE}


def make_optimizer(params, kind: str, lr: float, weight_decay: float) -> torch.optim.Optimizer:
    params = [p for p in params if p.requires_grad]
    if kind == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=0.9, weight_decay=weight_decay)
    if kind == "adam":
        return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    if kind == "lars":
        return LARS(params, lr=lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")


def make_schedule(optimizer, kind: str, epochs: int):
    if kind == "cosine":
        return torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=epochs)
    return torch.optim.lr_scheduler.LambdaLR(optimizer, lambda _: 1.0)


def pretrain(config: SSLTaskConfig, data: DatasetManifest | UnlabeledView, seed: int, dataset: str | None = None,
             single_threaded: bool = False, init: Checkpoint | None = None) -> Checkpoint:
    """Train an encoder on ``config.task`` without labels and return its checkpoint.

    A manifest is reduced to its label-free train view before any image is
    read. The checkpoint metadata carries the per-epoch mean training loss
    (``extra["loss_history"]``) and the config snapshot. ``init`` starts the
    encoder from existing weights (for example an imported external model).
    """
    if single_threaded:
        runtime.set_single_threaded()
    view = data.unlabeled_view("train") if isinstance(data, DatasetManifest) else data
    if not isinstance(view, UnlabeledView):
        raise TypeError("pretrain needs a DatasetManifest or an UnlabeledView")
    if len(view) == 0:
        raise ValueError("train split is empty")
    images = load_images(view.paths, config.image_size)
    spec = EncoderSpec.for_architecture(config.architecture, config.input_size)
    encoder = build_encoder(spec, derive_seed(seed, 1) & _SEED_MASK)
    if init is not None:
        load_encoder_state(encoder, init)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, 2) & _SEED_MASK)
        task = _TASKS[config.task](config, encoder, seed)

    train_idx = np.arange(len(view))
    val_idx = None
    if config.task == "vae" and len(view) >= 20:
        order = epoch_order(len(view), seed, -1)
        cut = max(1, len(view) // 20)
        val_idx, train_idx = np.sort(order[:cut]), np.sort(order[cut:])

    optimizer = make_optimizer(task.model.parameters(), config.optimizer, config.learning_rate, config.weight_decay)
    schedule = make_schedule(optimizer, config.schedule, config.epochs)
    history, val_history = [], []
    best_val, best_state, best_epoch = float("inf"), None, None
    drop_last = len(train_idx) > config.batch_size
    start = time.time()
    task.model.train()
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        for step, pos in enumerate(batches(len(train_idx), config.batch_size, seed, epoch, drop_last)):
            if len(pos) < 2:
                continue
            idx = train_idx[pos]
            loss = task.loss(images[idx], idx, epoch, step)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        schedule.step()
        history.append(total / max(count, 1))
        if val_idx is not None:
            v = task.validation_reconstruction(images[val_idx], epoch)
            val_history.append(v)
            if v < best_val:
                best_val, best_epoch = v, epoch
                best_state = copy.deepcopy(task.export().state_dict())
            if config.sample_dir:
                dump_samples(task.model, config.sample_dir, epoch, seed=seed)
        log.info("%s epoch %d/%d loss %.4f", config.task, epoch + 1, config.epochs, history[-1])

    exported = task.export()
    extra = {"loss_history": history, "config": config.to_dict(), "num_samples": len(view),
             "wall_clock": time.time() - start,
             "init": None if init is None else {"task": init.meta.task, "dataset": init.meta.dataset}}
    if best_state is not None:
        exported.load_state_dict(best_state)
        extra.update(val_reconstruction=val_history, selected_epoch=best_epoch)
    meta = CheckpointMeta(config.task, dataset or view.name, config.epochs, seed, spec, extra=extra)
    return checkpoint_from_model(exported, meta)
