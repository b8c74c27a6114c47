"""Frequency filtering when bucket popularity drifts over time.

Half of every vocabulary is relabelled after the first period. A model that
only noises the top-k buckets has to know which buckets are popular; this
compares three sources of that knowledge while the model is refreshed
period by period.

Run with ``python3 demos/03_streaming_drift.py``.
"""
# %%
import math

import numpy as np

from sparsedp.dp_optimizers import OptimizerConfig
from sparsedp.harness import data, experiments as ex

# %%
dataset = data.generate(data.DatasetSpec(n_examples=25_000,
                                         vocab_sizes=(5_000,) * 5,
                                         period_count=5, drift_period=1,
                                         seed=3))
config = OptimizerConfig(algorithm="dpfest", lr=5.0, batch_size=512,
                         steps=200, dpfest_k=500, dpfest_epsilon=math.inf)

# %% ``first`` uses only the first period's counts, ``streaming`` a running
# count refreshed every period, ``all`` the counts of every training period.
for source in ("first", "streaming", "all"):
  accs = [ex.run_streaming(dataset, ex.StreamingConfig(5, 1, source), config,
                           seed=s)[-1].accuracy for s in range(3)]
  print(f"{source:9s} final accuracy {np.mean(accs):.4f} (+- {np.std(accs):.4f})")
