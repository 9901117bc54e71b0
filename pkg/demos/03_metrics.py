# %% [markdown]
# # Scoring runs
#
# Every run is scored by test macro-F1 after each epoch. BEST is the peak of
# that series and LAST the mean of its final five values; a large BEST - LAST
# gap means the model memorised noise late in training. Across noise rates
# the robustness score summarises how fast performance falls, and Fisher's
# class separability score measures how far apart classes sit in a feature
# space.

# %%
import numpy as np

from nlbench.metrics import (EmbeddingMatrix, MetricReport, evaluate_predictions, fisher_css, robustness_score,
                             track)

rng = np.random.default_rng(0)

# %% [markdown]
# ## BEST and LAST on a simulated memorisation curve
#
# Accuracy climbs for ten epochs, then decays as noisy labels are fitted.

# %%
labels = rng.integers(0, 3, 600)
report = MetricReport()
for epoch in range(20):
    accuracy = 0.4 + 0.05 * min(epoch, 10) - 0.02 * max(0, epoch - 10)
    preds = np.where(rng.random(600) < accuracy, labels, rng.integers(0, 3, 600))
    track(report, evaluate_predictions(epoch, preds, labels, 3))
print("series:", np.round(report.series, 3))
print(f"BEST {report.best:.3f}  LAST {report.last:.3f}")

# %% [markdown]
# ## Robustness score
#
# The number of evaluated noise rates divided by the summed drop from the
# clean score. A method that loses 0.1 per step over three rates scores 10.

# %%
print(robustness_score([(0.0, 0.9), (0.2, 0.8), (0.4, 0.7)]).value)
print(robustness_score([(0.0, 0.9), (0.2, 0.88), (0.4, 0.85)]).value)

# %% [markdown]
# ## Class separability
#
# Between-class over within-class scatter, each normalised by its degrees of
# freedom. Moving the class means apart raises the score.

# %%
y = np.repeat(np.arange(3), 200)
for spread in (0.5, 1.0, 3.0):
    x = rng.normal(size=(600, 8)) + spread * np.eye(8)[y]
    print(spread, round(fisher_css(EmbeddingMatrix(x, y)).value, 2))
