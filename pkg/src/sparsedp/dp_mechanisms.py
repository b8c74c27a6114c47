"""Randomized building blocks shared by the private optimizers.

Everything here is a pure function of its inputs and a
``numpy.random.Generator``. Contribution maps and masks are kept per feature
as lists indexed like ``ModelParams.tables``.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Sequence

import numpy as np
from scipy import special

from sparsedp.sparse_model import RowSparseGradient

PURPOSES = ("init", "sampling", "mechanism-noise", "contribution-noise",
            "gumbel")


class RngStreams:
  """Independent generators keyed by purpose, all derived from one seed.

  Each purpose maps to its own ``SeedSequence`` child so, for example,
  changing the threshold of a run never shifts the gradient noise draws.
  """

  def __init__(self, seed: int):
    self.seed = int(seed)
    self._streams: dict[str, np.random.Generator] = {}

  def __getitem__(self, purpose: str) -> np.random.Generator:
    if purpose not in PURPOSES:
      raise KeyError(f"unknown rng purpose {purpose!r}")
    if purpose not in self._streams:
      seq = np.random.SeedSequence(self.seed,
                                   spawn_key=(PURPOSES.index(purpose),))
      self._streams[purpose] = np.random.default_rng(seq)
    return self._streams[purpose]


@dataclasses.dataclass(frozen=True)
class NoiseConfig:
  """Clipping norms, noise multipliers and threshold of one private step.

  ``math.inf`` is accepted for either clip norm and means "do not clip".
  """
  c1: float = 1.0
  c2: float = 1.0
  sigma1: float = 0.0
  sigma2: float = 0.0
  tau: float = 0.0

  def __post_init__(self):
    if not (self.c1 > 0 and self.c2 > 0):
      raise ValueError("clip norms must be positive")
    if self.sigma1 < 0 or self.sigma2 < 0 or self.tau < 0:
      raise ValueError("noise multipliers and threshold must be nonnegative")


@dataclasses.dataclass
class ContributionMap:
  """Per-feature contribution vectors stored sparsely (nonzero entries)."""
  vocab_sizes: tuple[int, ...]
  indices: list[np.ndarray]
  values: list[np.ndarray]

  def dense(self) -> list[np.ndarray]:
    out = []
    for c, idx, val in zip(self.vocab_sizes, self.indices, self.values):
      v = np.zeros(c)
      v[idx] = val
      out.append(v)
    return out


@dataclasses.dataclass
class SurvivalMask:
  """Sorted surviving row indices per feature."""
  rows: list[np.ndarray]

  @property
  def sizes(self) -> list[int]:
    return [len(r) for r in self.rows]

  @property
  def total(self) -> int:
    return sum(self.sizes)


def clip_scales(totals: np.ndarray, c1: float) -> np.ndarray:
  """``min(1, c1 / sqrt(m))`` for each example with ``m`` activated buckets."""
  totals = np.asarray(totals, dtype=np.float64)
  with np.errstate(divide="ignore"):
    scale = np.minimum(1.0, c1 / np.sqrt(totals))
  scale[totals == 0] = 0.0
  return scale


def contribution_map_from_entries(owners: Sequence[np.ndarray],
                                  rows: Sequence[np.ndarray],
                                  n_examples: int,
                                  vocab_sizes: Sequence[int],
                                  c1: float) -> ContributionMap:
  """Noiseless clipped contribution map from (example, bucket) entries.

  ``owners[f][e]`` is the example owning entry ``e`` of feature ``f`` and
  ``rows[f][e]`` its bucket. Each example's binary activation vector, taken
  across all features jointly, is l2-clipped to ``c1`` before summation.
  Entries must be unique per (example, feature, bucket).
  """
  totals = np.zeros(n_examples)
  for own in owners:
    totals += np.bincount(own, minlength=n_examples)
  scale = clip_scales(totals, c1)
  indices, values = [], []
  for own, r in zip(owners, rows):
    uniq, inverse = np.unique(r, return_inverse=True)
    values.append(np.bincount(inverse, weights=scale[own],
                              minlength=len(uniq)))
    indices.append(uniq)
  return ContributionMap(tuple(vocab_sizes), indices, values)


def contribution_map(activations: Sequence[Sequence[Sequence[int]]],
                     vocab_sizes: Sequence[int],
                     c1: float) -> ContributionMap:
  """Contribution map from per-example activation sets.

  Args:
    activations: ``activations[i][f]`` lists the buckets of feature ``f``
      activated by example ``i``; duplicates are ignored.
    vocab_sizes: vocabulary size of each feature.
    c1: l2 clip norm applied to each example's joint activation vector.
  """
  n_features = len(vocab_sizes)
  owners, rows = [[] for _ in range(n_features)], [[] for _ in range(n_features)]
  for i, example in enumerate(activations):
    for f, buckets in enumerate(example):
      b = np.unique(np.asarray(buckets, dtype=np.int64))
      owners[f].append(np.full(len(b), i, dtype=np.int64))
      rows[f].append(b)
  cat = lambda parts: (np.concatenate(parts) if parts else
                       np.zeros(0, np.int64))
  return contribution_map_from_entries([cat(o) for o in owners],
                                       [cat(r) for r in rows],
                                       len(activations), vocab_sizes, c1)


def noise_contribution_map(vhat: ContributionMap, c1: float, sigma1: float,
                           rng: np.random.Generator) -> list[np.ndarray]:
  """Dense noisy map ``V = Vhat + c1 * N(0, sigma1^2 I)`` for every feature."""
  dense = vhat.dense()
  if sigma1 == 0:
    return dense
  return [v + rng.normal(0.0, sigma1 * c1, size=v.shape) for v in dense]


def threshold_mask(noisy: Sequence[np.ndarray], tau: float) -> SurvivalMask:
  """Keeps the buckets with ``V[j] >= tau``."""
  return SurvivalMask([np.flatnonzero(np.asarray(v) >= tau) for v in noisy])


def _nth_missing(excluded: np.ndarray, ordinals: np.ndarray) -> np.ndarray:
  """Values of the ``ordinals``-th nonnegative integers not in ``excluded``.

  ``excluded`` must be sorted and unique.
  """
  shifted = excluded - np.arange(len(excluded))
  return ordinals + np.searchsorted(shifted, ordinals, side="right")


def geometric_positions(n: int, p: float,
                        rng: np.random.Generator) -> np.ndarray:
  """Positions of the ones in a length-``n`` Bernoulli(``p``) vector.

  Gaps between consecutive ones are Geometric(``p``), so only the ones are
  ever generated.
  """
  if n <= 0 or p <= 0:
    return np.zeros(0, dtype=np.int64)
  if p >= 1:
    return np.arange(n, dtype=np.int64)
  chunks, last = [], -1
  expected = n * p
  while True:
    draw = int(expected + 6 * math.sqrt(expected) + 16)
    pos = last + np.cumsum(rng.geometric(p, size=draw))
    if pos[-1] >= n:
      chunks.append(pos[pos < n])
      break
    chunks.append(pos)
    last = int(pos[-1])
  return np.concatenate(chunks).astype(np.int64)


def survival_probability(vhat, tau: float, sigma1: float, c1: float):
  """``Pr[vhat + c1 * N(0, sigma1^2) >= tau]``."""
  return special.ndtr((np.asarray(vhat, dtype=np.float64) - tau) /
                      (sigma1 * c1))


def sample_mask_efficient(vhat: ContributionMap,
                          tau: float,
                          sigma1: float,
                          c1: float,
                          rng: np.random.Generator,
                          universe: Sequence[np.ndarray | None] | None = None
                         ) -> SurvivalMask:
  """Samples the survival mask without materialising length-``c`` noise.

  Coordinates with a nonzero noiseless contribution are decided by one
  Bernoulli draw each. Zero coordinates all share the survival probability
  ``p``; their survivors are located by walking geometric gaps.

  Args:
    vhat: noiseless contribution map.
    tau: threshold.
    sigma1: noise multiplier of the contribution map; must be positive.
    c1: contribution clip norm.
    rng: generator.
    universe: optional sorted row subset per feature. Rows outside it are
      never considered (they cannot survive).
  """
  if not sigma1 > 0:
    raise ValueError("sigma1 must be positive; use threshold_mask on vhat")
  p_zero = float(survival_probability(0.0, tau, sigma1, c1))
  rows = []
  for f, (c, idx, val) in enumerate(zip(vhat.vocab_sizes, vhat.indices,
                                        vhat.values)):
    allowed = None if universe is None else universe[f]
    if allowed is None:
      size = c
      local = idx
    else:
      pos = np.searchsorted(allowed, idx)
      inside = np.zeros(len(idx), dtype=bool)
      ok = pos < len(allowed)
      inside[ok] = allowed[pos[ok]] == idx[ok]
      local, val = pos[inside], val[inside]
      size = len(allowed)
    nz_keep = local[rng.random(len(local)) <
                    survival_probability(val, tau, sigma1, c1)]
    ordinals = geometric_positions(size - len(local), p_zero, rng)
    zero_keep = _nth_missing(local, ordinals)
    kept = np.union1d(nz_keep, zero_keep)
    rows.append(kept if allowed is None else allowed[kept])
  return SurvivalMask(rows)


def gumbel_topk(counts, epsilon: float, k: int,
                rng: np.random.Generator | None = None) -> np.ndarray:
  """One-shot top-``k`` selection with Gumbel(1/epsilon) noise.

  ``epsilon=math.inf`` selects the exact top ``k``. Ties in the (noisy)
  scores go to the lower index. Returns indices in decreasing score order.
  """
  counts = np.asarray(counts, dtype=np.float64)
  c = len(counts)
  if k > c or k < 0:
    raise ValueError(f"cannot select {k} of {c} buckets")
  if not epsilon > 0:
    raise ValueError("epsilon must be positive")
  scores = counts
  if not math.isinf(epsilon):
    u = rng.random(c)
    u[u == 0] = np.finfo(np.float64).tiny
    scores = counts - np.log(-np.log(u)) / epsilon
  return np.argsort(-scores, kind="stable")[:k]


def dp_topk_multifeature(frequencies: Sequence[np.ndarray],
                         epsilon: float,
                         k: int,
                         rng: np.random.Generator | None = None
                        ) -> list[np.ndarray]:
  """Splits budget and selection size equally across features.

  Each of the ``p`` features runs ``gumbel_topk`` with ``epsilon / p`` and
  ``int(k / p)`` slots (capped at its vocabulary size).
  """
  p = len(frequencies)
  per_k = int(k / p)
  return [np.sort(gumbel_topk(h, epsilon / p, min(per_k, len(h)), rng))
          for h in frequencies]


def gradient_noise(rng: np.random.Generator, shape, std: float) -> np.ndarray:
  """Gaussian gradient noise; ``std == 0`` draws nothing."""
  if std == 0:
    return np.zeros(shape)
  return rng.normal(0.0, std, size=shape)


def noise_rows(grad, mask_rows: np.ndarray, c2: float, sigma2: float,
               rng: np.random.Generator):
  """Restricts ``grad`` to ``mask_rows`` and adds noise on exactly those rows.

  Args:
    grad: a ``RowSparseGradient`` (summed clipped gradients of one table).
    mask_rows: sorted surviving row indices.
    c2: gradient clip norm.
    sigma2: noise multiplier.
    rng: generator.

  Returns:
    A ``RowSparseGradient`` whose rows are exactly ``mask_rows``.
  """
  mask_rows = np.asarray(mask_rows, dtype=np.int64)
  d = grad.shape[1]
  std = sigma2 * c2 if sigma2 > 0 else 0.0
  values = gradient_noise(rng, (len(mask_rows), d), std)
  if len(mask_rows) and grad.nnz_rows:
    pos = np.searchsorted(mask_rows, grad.indices)
    pos_c = np.minimum(pos, len(mask_rows) - 1)
    hit = mask_rows[pos_c] == grad.indices
    values[pos_c[hit]] += grad.values[hit]
  return RowSparseGradient(grad.shape, mask_rows, values)
