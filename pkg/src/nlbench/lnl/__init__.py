"""Learning with noisy labels: cross-entropy baseline, Co-teaching and DivideMix."""
from nlbench.lnl.config import LAMBDA_U_OFF_RATES, METHODS, LNLConfig
from nlbench.lnl.dividemix import CleanSplit, GMMFit, dm_split, fit_gmm_1d, mixup_lambda, sharpen
from nlbench.lnl.selection import SelectionResult, coteach_select, forget_rate_schedule, keep_count
from nlbench.lnl.train import (LNLData, PeerEnsemble, build_model, coteach_epoch, dm_epoch, dm_loss, exchange_losses,
                               guess_labels, make_optimizer, refine_labels,
                               per_sample_losses, predict_proba, train_lnl, train_seeds, warmup)

__all__ = [
    "LAMBDA_U_OFF_RATES", "METHODS", "LNLConfig", "CleanSplit", "GMMFit", "dm_split", "fit_gmm_1d", "mixup_lambda",
    "sharpen", "SelectionResult", "coteach_select", "forget_rate_schedule", "keep_count", "LNLData", "PeerEnsemble",
    "build_model", "coteach_epoch", "dm_epoch", "dm_loss", "exchange_losses", "guess_labels", "refine_labels", "make_optimizer", "per_sample_losses", "predict_proba", "train_lnl",
    "train_seeds", "warmup",
]
