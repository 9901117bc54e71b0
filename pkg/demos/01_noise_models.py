# %% [markdown]
# # Label-noise models
#
# Two ways to corrupt labels: symmetric noise, where a label flips to any
# other class with equal probability, and class-dependent noise, where a
# label only flips inside a group of related classes. Both are described by a
# row-stochastic transition matrix: row = true class, column = observed class.

# %%
import numpy as np

from nlbench import noise
from nlbench.noise import NoiseSpec
from nlbench.presets import profile

np.set_printoptions(precision=3, suppress=True)

# %% [markdown]
# ## Symmetric noise
#
# With three classes and a noise rate of 0.5, half of every class keeps its
# label and the other half is split evenly between the two other classes.

# %%
sym = noise.build_symmetric_matrix(3, 0.5)
print(sym.entries)

# %% [markdown]
# ## Class-dependent noise
#
# The COVID chest X-ray profile groups "Covid" with "Non-Covid"; "Normal" is
# outside every group and keeps its label.

# %%
covid = profile("covid")
dep = noise.build_dependent_matrix(covid.num_classes, 0.3, covid.dependency_index_groups())
print(covid.class_names)
print(dep.entries)

# %% [markdown]
# ## Injecting and auditing
#
# Each label is resampled from its row with a uniform keyed on (seed, index),
# so the same seed gives the same noisy labels regardless of order. The audit
# recovers the matrix from the clean/noisy pair.

# %%
labels = np.arange(30_000) % 3
noisy = noise.inject(labels, sym, seed=1)
print("flipped fraction:", noisy.flipped.mean())
print(noise.audit(labels, noisy, 3).matrix)

# %% [markdown]
# ## Flipping threshold
#
# Training on noisy labels estimates the noisy posterior. Its argmax agrees
# with the clean posterior only while the noise rate is below a threshold:
# (c - 1) / c for symmetric noise and s / (s + 1) inside a group where each
# class can be confused with s others.

# %%
for c in (2, 3, 9):
    print(c, "classes:", noise.flipping_threshold(NoiseSpec("symmetric", 0.1), c))
print("dependent pair:", noise.flipping_threshold(NoiseSpec("class_dependent", 0.1, groups=[[0, 1]]), 3))

clean_posterior = np.array([[0.5, 0.3, 0.2]])
for eps in (0.4, 0.6, 0.7, 0.8):
    p = noise.noisy_posterior(clean_posterior, noise.build_symmetric_matrix(3, eps))
    print(f"eps={eps}: noisy posterior {p[0]}, argmax {p.argmax()}")
