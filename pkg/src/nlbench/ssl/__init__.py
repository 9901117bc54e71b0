"""Self-supervised pretraining: pretext tasks, contrastive objectives and a VAE."""
from nlbench.ssl.config import TASKS, SSLTaskConfig
from nlbench.ssl.lars import LARS
from nlbench.ssl.losses import barlow_loss, cross_correlation, kld, ntxent_loss, reconstruction_loss
from nlbench.ssl.moco import MomentumQueue, moco_step, momentum_update
from nlbench.ssl.pretext import (MAGNIFICATIONS, PermutationSet, generate_permutation_set, jigmag_batch, jigmag_boxes,
                                 jigsaw_batch, load_permutation_set, normalize_patches, rotation_batch,
                                 save_permutation_set)
from nlbench.ssl.pretrain import pretrain
from nlbench.ssl.vae import VAE, vae_loss, vae_step

__all__ = [
    "TASKS", "SSLTaskConfig", "LARS", "barlow_loss", "cross_correlation", "kld", "ntxent_loss", "reconstruction_loss",
    "MomentumQueue", "moco_step", "momentum_update", "MAGNIFICATIONS", "PermutationSet", "generate_permutation_set",
    "jigmag_batch", "jigmag_boxes", "jigsaw_batch", "load_permutation_set", "normalize_patches", "rotation_batch",
    "save_permutation_set", "pretrain", "VAE", "vae_loss", "vae_step",
]
