"""Private training steps for embedding models.

All step functions update ``params`` in place and return ``(params, report)``.
The averaged update is always ``(sum of clipped gradients + noise) / B``,
where ``B`` is the batch size (or, under Poisson sampling, the expected
batch size passed as ``denominator``).

Algorithms:

* ``sgd``: non-private minibatch SGD.
* ``dpsgd``: clip every per-example gradient to ``c2`` and add Gaussian noise
  to every coordinate.
* ``dpfest``: like ``dpsgd`` but the embedding gradients are restricted to a
  fixed selected vocabulary, and only those rows are noised.
* ``adafest``: per batch, build a noisy clipped contribution map, keep the
  buckets whose noisy contribution reaches ``tau`` and noise only those rows.
* ``adafest_plus``: ``adafest`` run inside a ``dpfest`` selected vocabulary.

The dense head always gets ``dpsgd`` treatment and shares the ``c2`` clip
with the embedding part of the same example.
"""

from __future__ import annotations

import dataclasses
import math
import time
from typing import Sequence

import numpy as np

from sparsedp import dp_mechanisms
from sparsedp.dp_mechanisms import NoiseConfig, SurvivalMask
from sparsedp.sparse_model import (Batch, ModelParams, PerExampleGradient,
                                   apply_update, batch_gradients)

ALGORITHMS = ("sgd", "dpsgd", "dpfest", "adafest", "adafest_plus")
FREQUENCY_SOURCES = ("public_prior", "dp_topk", "first_period", "all_periods",
                     "streaming")


@dataclasses.dataclass(frozen=True)
class OptimizerConfig:
  algorithm: str = "adafest"
  lr: float = 1.0
  batch_size: int = 1024
  steps: int = 500
  noise: NoiseConfig = NoiseConfig()
  dpfest_k: int = 0
  dpfest_epsilon: float = 0.01
  frequency_source: str = "dp_topk"
  sampling: str = "shuffle"
  mask_sampler: str = "geometric"

  def __post_init__(self):
    if self.algorithm not in ALGORITHMS:
      raise ValueError(f"unknown algorithm {self.algorithm!r}")
    if self.frequency_source not in FREQUENCY_SOURCES:
      raise ValueError(f"unknown frequency source {self.frequency_source!r}")
    if self.batch_size < 1 or self.steps < 1 or not self.lr > 0:
      raise ValueError("need batch_size >= 1, steps >= 1 and lr > 0")
    if self.sampling not in ("shuffle", "poisson"):
      raise ValueError(f"unknown sampling {self.sampling!r}")
    if self.mask_sampler not in ("geometric", "dense"):
      raise ValueError(f"unknown mask sampler {self.mask_sampler!r}")


@dataclasses.dataclass(frozen=True)
class SelectedVocabulary:
  """Sorted retained bucket indices per feature."""
  rows: tuple[np.ndarray, ...]

  @classmethod
  def full(cls, vocab_sizes: Sequence[int]) -> "SelectedVocabulary":
    return cls(tuple(np.arange(c) for c in vocab_sizes))

  @property
  def sizes(self) -> list[int]:
    return [len(r) for r in self.rows]


@dataclasses.dataclass
class StepReport:
  """What one step released.

  ``noised_coordinate_count`` is the number of coordinates of the released
  update that carry a noise term (for ``sgd``: the nonzero coordinates),
  i.e. the gradient size.
  """
  noised_coordinate_count: int
  embedding_coordinates: int
  head_coordinates: int
  surviving_rows: list[int]
  loss: float
  wall_time: float


def _member(values: np.ndarray, sorted_rows: np.ndarray) -> np.ndarray:
  if len(sorted_rows) == 0:
    return np.zeros(len(values), dtype=bool)
  pos = np.minimum(np.searchsorted(sorted_rows, values), len(sorted_rows) - 1)
  return sorted_rows[pos] == values


def _clip_weights(sq_norms: np.ndarray, c2: float) -> np.ndarray:
  with np.errstate(divide="ignore"):
    return np.minimum(1.0, c2 / np.sqrt(sq_norms))


def _finish(params: ModelParams, total: PerExampleGradient,
            rows: list[np.ndarray] | None, c2: float, sigma2: float,
            lr: float, denominator: float, rng: np.random.Generator):
  """Adds noise (rows ``None`` means: every row), averages and applies."""
  std = sigma2 * c2 if sigma2 > 0 else 0.0
  embedding = []
  for f, g in enumerate(total.embedding):
    mask = np.arange(g.shape[0]) if rows is None else rows[f]
    embedding.append(dp_mechanisms.noise_rows(g, mask, c2, sigma2, rng))
  weights = [w + dp_mechanisms.gradient_noise(rng, w.shape, std)
             for w in total.weights]
  biases = [b + dp_mechanisms.gradient_noise(rng, b.shape, std)
            for b in total.biases]
  update = PerExampleGradient(embedding, weights, biases)
  update = update.scale(1.0 / denominator)
  apply_update(params, update, lr, inplace=True)
  return update


def sgd_step(params: ModelParams, batch: Batch, lr: float,
             denominator: float | None = None):
  """Plain minibatch SGD; reports the number of nonzero update coordinates."""
  start = time.perf_counter()
  bg = batch_gradients(params, batch)
  keep = [bg.active_entries(f) for f in range(len(params.tables))]
  total = bg.weighted_sum(np.ones(len(batch)), keep)
  update = total.scale(1.0 / (denominator or len(batch)))
  apply_update(params, update, lr, inplace=True)
  emb = sum(g.values.size for g in update.embedding)
  report = StepReport(emb + params.head_size, emb, params.head_size,
                      [g.nnz_rows for g in update.embedding],
                      float(bg.losses.mean()), time.perf_counter() - start)
  return params, report


def _masked_private_step(params: ModelParams, batch: Batch, *, c2: float,
                         sigma2: float, lr: float, rng: np.random.Generator,
                         allowed: Sequence[np.ndarray] | None,
                         adaptive: NoiseConfig | None,
                         contribution_rng: np.random.Generator | None,
                         mask_sampler: str, denominator: float | None):
  start = time.perf_counter()
  n_features = len(params.tables)
  vocab = [t.shape[0] for t in params.tables]
  bg = batch_gradients(params, batch)
  keep = [bg.active_entries(f) for f in range(n_features)]
  if allowed is not None:
    keep = [k & _member(batch.indices[f], allowed[f])
            for f, k in enumerate(keep)]
  rows = None if allowed is None else list(allowed)

  if adaptive is not None:
    owners = [batch.owners(f)[k] for f, k in enumerate(keep)]
    buckets = [batch.indices[f][k] for f, k in enumerate(keep)]
    vhat = dp_mechanisms.contribution_map_from_entries(
        owners, buckets, len(batch), vocab, adaptive.c1)
    mask = _survival_mask(vhat, adaptive, allowed, contribution_rng,
                          mask_sampler)
    rows = mask.rows
    keep = [k & _member(batch.indices[f], rows[f]) for f, k in enumerate(keep)]

  sq = bg.dense_sq_norms() + bg.embedding_sq_norms(keep)
  weights = _clip_weights(sq, c2)
  total = bg.weighted_sum(weights, keep)
  update = _finish(params, total, rows, c2, sigma2, lr,
                   denominator or len(batch), rng)
  emb = sum(g.values.size for g in update.embedding)
  report = StepReport(emb + params.head_size, emb, params.head_size,
                      [g.nnz_rows for g in update.embedding],
                      float(bg.losses.mean()), time.perf_counter() - start)
  return params, report


def _survival_mask(vhat, noise: NoiseConfig, allowed, rng, mask_sampler):
  universe = (list(allowed) if allowed is not None else
              [np.arange(c) for c in vhat.vocab_sizes])
  if noise.sigma1 == 0:
    if noise.tau <= 0:
      return SurvivalMask([u.copy() for u in universe])
    return SurvivalMask([idx[val >= noise.tau]
                         for idx, val in zip(vhat.indices, vhat.values)])
  if mask_sampler == "geometric":
    return dp_mechanisms.sample_mask_efficient(vhat, noise.tau, noise.sigma1,
                                               noise.c1, rng, allowed)
  noisy = dp_mechanisms.noise_contribution_map(vhat, noise.c1, noise.sigma1,
                                               rng)
  if allowed is not None:
    for v, u in zip(noisy, universe):
      outside = np.ones(len(v), dtype=bool)
      outside[u] = False
      v[outside] = -np.inf
  return dp_mechanisms.threshold_mask(noisy, noise.tau)


def dpsgd_step(params: ModelParams, batch: Batch, c2: float, sigma2: float,
               lr: float, rng: np.random.Generator,
               denominator: float | None = None):
  """DP-SGD: clip each example to ``c2`` and noise every coordinate."""
  return _masked_private_step(params, batch, c2=c2, sigma2=sigma2, lr=lr,
                              rng=rng, allowed=None, adaptive=None,
                              contribution_rng=None, mask_sampler="geometric",
                              denominator=denominator)


def dpfest_step(params: ModelParams, batch: Batch,
                selected: SelectedVocabulary, c2: float, sigma2: float,
                lr: float, rng: np.random.Generator,
                denominator: float | None = None):
  """DP-SGD restricted to a fixed selected vocabulary.

  Embedding gradients at unselected buckets are zeroed before clipping and
  never noised; only selected rows and the head receive noise.
  """
  return _masked_private_step(params, batch, c2=c2, sigma2=sigma2, lr=lr,
                              rng=rng, allowed=selected.rows, adaptive=None,
                              contribution_rng=None, mask_sampler="geometric",
                              denominator=denominator)


def adafest_step(params: ModelParams, batch: Batch, noise: NoiseConfig,
                 lr: float, rng: np.random.Generator,
                 contribution_rng: np.random.Generator | None = None,
                 mask_sampler: str = "geometric",
                 denominator: float | None = None):
  """One step of adaptive filtering-enabled sparse training.

  1. Per-example activation sets are read off the embedding gradient
     sparsity and summed into a contribution map, each example clipped to
     ``noise.c1`` across all features.
  2. Buckets whose noisy contribution reaches ``noise.tau`` survive.
  3. Per-example gradients are zeroed outside the survivors, then clipped
     to ``noise.c2``.
  4. The sum gets ``N(0, (sigma2 c2)^2)`` noise on surviving rows and on the
     head, and is averaged and applied.

  ``contribution_rng`` drives step 2 (defaults to ``rng``).
  """
  return _masked_private_step(
      params, batch, c2=noise.c2, sigma2=noise.sigma2, lr=lr, rng=rng,
      allowed=None, adaptive=noise,
      contribution_rng=rng if contribution_rng is None else contribution_rng,
      mask_sampler=mask_sampler, denominator=denominator)


def adafest_plus_step(params: ModelParams, batch: Batch,
                      selected: SelectedVocabulary, noise: NoiseConfig,
                      lr: float, rng: np.random.Generator,
                      contribution_rng: np.random.Generator | None = None,
                      mask_sampler: str = "geometric",
                      denominator: float | None = None):
  """``adafest_step`` on the vocabulary restricted to ``selected``."""
  return _masked_private_step(
      params, batch, c2=noise.c2, sigma2=noise.sigma2, lr=lr, rng=rng,
      allowed=selected.rows, adaptive=noise,
      contribution_rng=rng if contribution_rng is None else contribution_rng,
      mask_sampler=mask_sampler, denominator=denominator)


def bucket_frequencies(batch: Batch, vocab_sizes: Sequence[int]
                      ) -> list[np.ndarray]:
  """Number of examples activating each bucket, per feature."""
  return [np.bincount(idx, minlength=c)
          for idx, c in zip(batch.indices, vocab_sizes)]


def dpfest_select(frequencies: Sequence[np.ndarray], k: int,
                  epsilon: float | None = None,
                  rng: np.random.Generator | None = None
                 ) -> SelectedVocabulary:
  """Selects ``k`` buckets in total, split evenly across features.

  With ``epsilon=None`` the frequencies are treated as public and the exact
  top ``int(k / p)`` of each feature is kept (no privacy cost). Otherwise
  one-shot Gumbel top-k runs with budget ``epsilon / p`` per feature; the
  caller must deduct ``epsilon`` from the training budget.
  """
  if k <= 0:
    raise ValueError("k must be positive")
  eps = math.inf if epsilon is None else epsilon
  return SelectedVocabulary(tuple(
      dp_mechanisms.dp_topk_multifeature(frequencies, eps, k, rng)))
