# %% [markdown]
# # Finding the clean samples
#
# Networks fit clean labels before noisy ones, so early in training the
# per-sample loss separates the two. Co-teaching keeps the smallest-loss
# fraction of each batch; DivideMix fits a two-component Gaussian mixture to
# the losses and treats the low-mean component as clean.

# %%
import numpy as np

from nlbench.lnl import coteach_select, dm_split, forget_rate_schedule, sharpen

rng = np.random.default_rng(0)

# %% [markdown]
# ## Keep-rate schedule
#
# The kept fraction falls linearly from 1 to 1 - tau over the first t_k
# epochs, then stays there.

# %%
print([round(forget_rate_schedule(e, tau=0.5, t_k=10), 2) for e in range(0, 15)])

# %% [markdown]
# ## Small-loss selection on a simulated batch
#
# 128 samples, half with noisy labels. Noisy samples have larger losses on
# average, but the two distributions overlap.

# %%
is_clean = rng.random(128) < 0.5
losses = np.where(is_clean, rng.gamma(2.0, 0.2, 128), rng.gamma(4.0, 0.4, 128))
kept = coteach_select(losses, keep_rate=0.5).kept_indices
print(f"kept {len(kept)} samples, {is_clean[kept].mean():.0%} clean (batch is {is_clean.mean():.0%} clean)")

# %% [markdown]
# ## Mixture split
#
# The same idea over a whole epoch of losses. The clean probability is the
# posterior of the low-mean component.

# %%
is_clean = rng.random(2000) < 0.5
losses = np.where(is_clean, rng.gamma(2.0, 0.2, 2000), rng.gamma(6.0, 0.4, 2000))
split = dm_split(losses)
print(f"labelled set: {split.clean_mask.sum()} samples, {is_clean[split.clean_mask].mean():.1%} truly clean")
print(f"unlabelled set: {(~split.clean_mask).sum()} samples")

# %% [markdown]
# ## Sharpening guessed labels
#
# Label guesses for the unlabelled set are averaged over views and then
# sharpened with temperature T, which pushes mass toward the argmax.

# %%
guess = np.array([0.5, 0.3, 0.2])
for t in (1.0, 0.5, 0.2):
    print(t, sharpen(guess, t).round(3))
