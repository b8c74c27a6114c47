"""Embedding classifier with row-sparse embedding gradients.

The model maps each categorical feature through its own embedding table
(sum or mean pooling over the activated buckets), concatenates the pooled
vectors with log1p-transformed numeric features and feeds the result through
a small ReLU MLP that emits a single logit. Training uses binary
cross-entropy on that logit.

Two gradient paths are provided:

* ``forward`` / ``per_example_gradient`` work on a single :class:`Example`
  and return explicit :class:`RowSparseGradient` objects. They are the
  reference path used by tests and small experiments.
* ``batch_gradients`` evaluates a whole minibatch at once and returns the
  factors of every per-example gradient (layer inputs, layer deltas and
  pooled-embedding gradients) without materialising them. Per-example norms
  and clipped sums are computed from those factors, which is what makes the
  private optimizers affordable at desk scale.

Embedding lookups are always row gathers and embedding updates are always
scatter-adds; no one-hot matrix product is formed anywhere.
"""

from __future__ import annotations

import dataclasses
from typing import Iterable, Sequence

import numpy as np

POOLING_MODES = ("sum", "mean")


class InputError(ValueError):
  """An example does not conform to the model's feature specs."""


class NumericError(FloatingPointError):
  """A non-finite value appeared in a forward or backward pass."""


class StructureError(ValueError):
  """Gradient or update shapes do not match the model."""


@dataclasses.dataclass(frozen=True)
class FeatureSpec:
  """Static description of one categorical feature.

  Attributes:
    feature_id: identifier, unique within a model.
    vocab_size: number of buckets ``c``.
    embedding_dim: embedding size ``d``.
    pooling: how multiple activated buckets are combined, ``sum`` or ``mean``.
  """
  feature_id: int
  vocab_size: int
  embedding_dim: int
  pooling: str = "sum"

  def __post_init__(self):
    if self.vocab_size < 1 or self.embedding_dim < 1:
      raise ValueError(f"invalid feature spec {self}")
    if self.pooling not in POOLING_MODES:
      raise ValueError(f"unknown pooling {self.pooling!r}")


@dataclasses.dataclass
class ModelParams:
  """Embedding tables plus a dense ReLU head.

  ``weights[l]`` has shape ``(fan_in, fan_out)``; the last layer has a single
  output unit. Hidden layers use ReLU.
  """
  features: tuple[FeatureSpec, ...]
  n_numeric: int
  tables: list[np.ndarray]
  weights: list[np.ndarray]
  biases: list[np.ndarray]

  def __post_init__(self):
    ids = [f.feature_id for f in self.features]
    if len(set(ids)) != len(ids):
      raise ValueError("feature ids must be unique")
    for spec, table in zip(self.features, self.tables):
      if table.shape != (spec.vocab_size, spec.embedding_dim):
        raise StructureError(
            f"table for feature {spec.feature_id} has shape {table.shape}")
    fan_in = self.input_dim
    for w, b in zip(self.weights, self.biases):
      if w.shape[0] != fan_in or b.shape != (w.shape[1],):
        raise StructureError("dense layer dimensions do not chain")
      fan_in = w.shape[1]
    if fan_in != 1:
      raise StructureError("the head must end in a single logit")

  @property
  def input_dim(self) -> int:
    return sum(f.embedding_dim for f in self.features) + self.n_numeric

  @property
  def embedding_size(self) -> int:
    return sum(t.size for t in self.tables)

  @property
  def head_size(self) -> int:
    return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

  @property
  def num_params(self) -> int:
    return self.embedding_size + self.head_size

  def copy(self) -> "ModelParams":
    return ModelParams(
        features=self.features,
        n_numeric=self.n_numeric,
        tables=[t.copy() for t in self.tables],
        weights=[w.copy() for w in self.weights],
        biases=[b.copy() for b in self.biases],
    )

  def all_finite(self) -> bool:
    arrays = [*self.tables, *self.weights, *self.biases]
    return all(np.all(np.isfinite(a)) for a in arrays)


def init_params(features: Sequence[FeatureSpec],
                n_numeric: int,
                hidden: Sequence[int] = (64, 64),
                rng: np.random.Generator | None = None) -> ModelParams:
  """Uniform fan-in scaled initialisation.

  Embedding rows are drawn from ``U(-1/sqrt(d), 1/sqrt(d))`` and dense layers
  from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``.
  """
  rng = np.random.default_rng(0) if rng is None else rng
  features = tuple(features)
  tables = []
  for f in features:
    bound = 1.0 / np.sqrt(f.embedding_dim)
    tables.append(rng.uniform(-bound, bound,
                              size=(f.vocab_size, f.embedding_dim)))
  dims = [sum(f.embedding_dim for f in features) + n_numeric, *hidden, 1]
  weights, biases = [], []
  for fan_in, fan_out in zip(dims[:-1], dims[1:]):
    bound = 1.0 / np.sqrt(fan_in)
    weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    biases.append(rng.uniform(-bound, bound, size=fan_out))
  return ModelParams(features, n_numeric, tables, weights, biases)


@dataclasses.dataclass
class Example:
  """One labelled example.

  ``numeric`` holds already log1p-transformed values. ``buckets[f]`` is the
  sorted, de-duplicated array of activated bucket indices of feature ``f``.
  """
  label: int
  numeric: np.ndarray
  buckets: tuple[np.ndarray, ...]

  @classmethod
  def create(cls, label: int, numeric_raw: Iterable[float],
             buckets: Iterable[Iterable[int]]) -> "Example":
    """Builds an example from raw (non-negative) numeric values."""
    numeric = np.log1p(np.asarray(list(numeric_raw), dtype=np.float64))
    return cls(int(label), numeric,
               tuple(np.unique(np.asarray(list(b), dtype=np.int64))
                     for b in buckets))


def check_example(params: ModelParams, example: Example) -> None:
  if len(example.buckets) != len(params.features):
    raise InputError("wrong number of categorical features")
  if np.shape(example.numeric) != (params.n_numeric,):
    raise InputError("wrong number of numeric features")
  for spec, b in zip(params.features, example.buckets):
    if b.size == 0:
      raise InputError(f"feature {spec.feature_id} has no activated bucket")
    if b.min() < 0 or b.max() >= spec.vocab_size:
      raise InputError(f"bucket index out of range for feature {spec.feature_id}")


@dataclasses.dataclass
class RowSparseGradient:
  """Gradient of one ``c x d`` table stored as (sorted row indices, rows)."""
  shape: tuple[int, int]
  indices: np.ndarray
  values: np.ndarray

  def __post_init__(self):
    self.indices = np.asarray(self.indices, dtype=np.int64)
    self.values = np.asarray(self.values, dtype=np.float64).reshape(
        len(self.indices), self.shape[1])
    if self.indices.size and (self.indices[0] < 0 or
                              self.indices[-1] >= self.shape[0]):
      raise StructureError("row index outside the table")
    if np.any(np.diff(self.indices) <= 0):
      raise StructureError("row indices must be strictly increasing")

  @classmethod
  def empty(cls, shape: tuple[int, int]) -> "RowSparseGradient":
    return cls(shape, np.zeros(0, np.int64), np.zeros((0, shape[1])))

  @classmethod
  def from_dense(cls, dense: np.ndarray) -> "RowSparseGradient":
    rows = np.flatnonzero(np.any(dense != 0, axis=1))
    return cls(dense.shape, rows, dense[rows])

  @classmethod
  def from_entries(cls, shape: tuple[int, int], rows: np.ndarray,
                   values: np.ndarray) -> "RowSparseGradient":
    """Sums possibly repeated ``(row, value)`` entries, in entry order."""
    uniq, inverse = np.unique(rows, return_inverse=True)
    out = np.zeros((len(uniq), shape[1]))
    np.add.at(out, inverse, values)
    return cls(shape, uniq, out)

  @property
  def nnz_rows(self) -> int:
    return len(self.indices)

  def to_dense(self) -> np.ndarray:
    dense = np.zeros(self.shape)
    dense[self.indices] = self.values
    return dense

  def sq_norm(self) -> float:
    return float(np.sum(self.values * self.values))

  def scale(self, s: float) -> "RowSparseGradient":
    return RowSparseGradient(self.shape, self.indices.copy(), self.values * s)

  def restrict(self, rows: np.ndarray) -> "RowSparseGradient":
    """Keeps only the rows listed in ``rows``."""
    keep = np.isin(self.indices, rows)
    return RowSparseGradient(self.shape, self.indices[keep], self.values[keep])

  def __add__(self, other: "RowSparseGradient") -> "RowSparseGradient":
    if self.shape != other.shape:
      raise StructureError("table shapes differ")
    return RowSparseGradient.from_entries(
        self.shape, np.concatenate([self.indices, other.indices]),
        np.concatenate([self.values, other.values]))


@dataclasses.dataclass
class PerExampleGradient:
  """Gradient of every model parameter for one example (or a sum of them)."""
  embedding: list[RowSparseGradient]
  weights: list[np.ndarray]
  biases: list[np.ndarray]

  def sq_norm(self) -> float:
    total = sum(g.sq_norm() for g in self.embedding)
    total += sum(float(np.sum(w * w)) for w in self.weights)
    total += sum(float(np.sum(b * b)) for b in self.biases)
    return total

  def norm(self) -> float:
    return float(np.sqrt(self.sq_norm()))

  def scale(self, s: float) -> "PerExampleGradient":
    return PerExampleGradient([g.scale(s) for g in self.embedding],
                              [w * s for w in self.weights],
                              [b * s for b in self.biases])

  def __add__(self, other: "PerExampleGradient") -> "PerExampleGradient":
    return PerExampleGradient(
        [a + b for a, b in zip(self.embedding, other.embedding)],
        [a + b for a, b in zip(self.weights, other.weights)],
        [a + b for a, b in zip(self.biases, other.biases)])

  @classmethod
  def zeros_like(cls, params: ModelParams) -> "PerExampleGradient":
    return cls([RowSparseGradient.empty(t.shape) for t in params.tables],
               [np.zeros_like(w) for w in params.weights],
               [np.zeros_like(b) for b in params.biases])


def bce_with_logits(logit, label):
  return np.logaddexp(0.0, logit) - label * logit


def sigmoid(x):
  return 0.5 * (1.0 + np.tanh(0.5 * x))


def _head_forward(params: ModelParams, h0: np.ndarray):
  """Runs the dense head on a ``(B, input_dim)`` array."""
  inputs, pre = [], []
  a = h0
  n_layers = len(params.weights)
  for l, (w, b) in enumerate(zip(params.weights, params.biases)):
    inputs.append(a)
    z = a @ w + b
    pre.append(z)
    a = np.maximum(z, 0.0) if l < n_layers - 1 else z
  return a[:, 0], inputs, pre


def _head_backward(params: ModelParams, pre: list[np.ndarray],
                   dlogit: np.ndarray):
  """Returns per-layer output deltas and the gradient w.r.t. the head input."""
  n_layers = len(params.weights)
  deltas = [None] * n_layers
  delta = dlogit[:, None]
  for l in range(n_layers - 1, -1, -1):
    deltas[l] = delta
    delta = delta @ params.weights[l].T
    if l > 0:
      delta = delta * (pre[l - 1] > 0)
  return deltas, delta


def forward(params: ModelParams, example: Example):
  """Computes the logit of one example.

  Returns:
    ``(logit, cache)`` where ``cache`` holds what ``per_example_gradient``
    needs for the backward pass.
  """
  check_example(params, example)
  pooled = []
  for spec, table, b in zip(params.features, params.tables, example.buckets):
    z = table[b].sum(axis=0)
    if spec.pooling == "mean":
      z = z / len(b)
    pooled.append(z)
  h0 = np.concatenate([*pooled, example.numeric])[None, :]
  logit, inputs, pre = _head_forward(params, h0)
  logit = float(logit[0])
  if not np.isfinite(logit):
    raise NumericError("non-finite logit")
  return logit, {"inputs": inputs, "pre": pre, "example": example}


def loss(params: ModelParams, example: Example) -> float:
  logit, _ = forward(params, example)
  return float(bce_with_logits(logit, example.label))


def per_example_gradient(params: ModelParams,
                         example: Example,
                         cache: dict | None = None) -> PerExampleGradient:
  """Gradient of the BCE loss of one example.

  The embedding part of feature ``f`` holds exactly the rows of the buckets
  the example activates (rows whose gradient is exactly zero are dropped).
  """
  if cache is None:
    _, cache = forward(params, example)
  dlogit = sigmoid(cache["pre"][-1][:, 0]) - example.label
  deltas, dh0 = _head_backward(params, cache["pre"], dlogit)
  weights = [np.outer(a[0], d[0]) for a, d in zip(cache["inputs"], deltas)]
  biases = [d[0].copy() for d in deltas]
  embedding = []
  offset = 0
  for spec, b in zip(params.features, example.buckets):
    dz = dh0[0, offset:offset + spec.embedding_dim]
    offset += spec.embedding_dim
    if spec.pooling == "mean":
      dz = dz / len(b)
    shape = (spec.vocab_size, spec.embedding_dim)
    if np.any(dz != 0):
      embedding.append(RowSparseGradient(shape, b, np.tile(dz, (len(b), 1))))
    else:
      embedding.append(RowSparseGradient.empty(shape))
  grad = PerExampleGradient(embedding, weights, biases)
  if not np.isfinite(grad.sq_norm()):
    raise NumericError("non-finite gradient")
  return grad


def clip_gradient(g: PerExampleGradient, clip_norm: float) -> PerExampleGradient:
  """Scales ``g`` to global l2 norm at most ``clip_norm``.

  Gradients already within the bound are returned unchanged (same object).
  """
  if not clip_norm > 0:
    raise ValueError("clip norm must be positive")
  norm = g.norm()
  if norm <= clip_norm:
    return g
  return g.scale(clip_norm / norm)


def apply_update(params: ModelParams,
                 update: PerExampleGradient,
                 lr: float,
                 inplace: bool = False) -> ModelParams:
  """SGD step ``theta <- theta - lr * update``.

  Embedding tables are touched only at the rows present in the update
  (scatter-add); the head is updated densely.
  """
  if len(update.embedding) != len(params.tables) or len(
      update.weights) != len(params.weights):
    raise StructureError("update does not match the model")
  out = params if inplace else params.copy()
  for table, g in zip(out.tables, update.embedding):
    if g.shape != table.shape:
      raise StructureError("embedding update shape mismatch")
    if g.nnz_rows == table.shape[0]:
      table -= lr * g.values
    elif g.nnz_rows:
      table[g.indices] -= lr * g.values
  for w, gw in zip(out.weights, update.weights):
    if w.shape != gw.shape:
      raise StructureError("dense update shape mismatch")
    w -= lr * gw
  for b, gb in zip(out.biases, update.biases):
    if b.shape != gb.shape:
      raise StructureError("dense update shape mismatch")
    b -= lr * gb
  return out


# ---------------------------------------------------------------------------
# Batched path.


@dataclasses.dataclass
class Batch:
  """Columnar minibatch.

  Categorical feature ``f`` is stored CSR-style: the buckets of example ``i``
  are ``indices[f][indptr[f][i]:indptr[f][i+1]]``.
  """
  labels: np.ndarray
  numeric: np.ndarray
  indptr: list[np.ndarray]
  indices: list[np.ndarray]

  def __len__(self) -> int:
    return len(self.labels)

  @classmethod
  def from_examples(cls, examples: Sequence[Example]) -> "Batch":
    labels = np.array([e.label for e in examples], dtype=np.float64)
    numeric = np.stack([e.numeric for e in examples]).astype(np.float64)
    indptr, indices = [], []
    for f in range(len(examples[0].buckets)):
      lengths = [len(e.buckets[f]) for e in examples]
      indptr.append(np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64))
      indices.append(np.concatenate([e.buckets[f] for e in examples]))
    return cls(labels, numeric, indptr, indices)

  def take(self, rows: np.ndarray) -> "Batch":
    rows = np.asarray(rows, dtype=np.int64)
    indptr, indices = [], []
    for ptr, idx in zip(self.indptr, self.indices):
      starts, stops = ptr[rows], ptr[rows + 1]
      lengths = stops - starts
      new_ptr = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
      if np.all(lengths == 1):
        gathered = idx[starts]
      else:
        offsets = np.repeat(starts - new_ptr[:-1], lengths)
        gathered = idx[np.arange(new_ptr[-1]) + offsets]
      indptr.append(new_ptr)
      indices.append(gathered)
    return Batch(self.labels[rows], self.numeric[rows], indptr, indices)

  def example(self, i: int) -> Example:
    return Example(int(self.labels[i]), self.numeric[i].copy(),
                   tuple(idx[ptr[i]:ptr[i + 1]].copy()
                         for ptr, idx in zip(self.indptr, self.indices)))

  def owners(self, f: int) -> np.ndarray:
    """Example index of every entry of ``indices[f]``."""
    return np.repeat(np.arange(len(self)), np.diff(self.indptr[f]))


def _pool(table: np.ndarray, spec: FeatureSpec, ptr: np.ndarray,
          idx: np.ndarray) -> np.ndarray:
  n = len(ptr) - 1
  lengths = np.diff(ptr)
  if np.all(lengths == 1):
    return table[idx]
  z = np.zeros((n, table.shape[1]))
  np.add.at(z, np.repeat(np.arange(n), lengths), table[idx])
  if spec.pooling == "mean":
    z /= lengths[:, None]
  return z


def batch_logits(params: ModelParams, batch: Batch) -> np.ndarray:
  pooled = [_pool(t, s, p, i) for t, s, p, i in zip(
      params.tables, params.features, batch.indptr, batch.indices)]
  h0 = np.concatenate([*pooled, batch.numeric], axis=1)
  logits, _, _ = _head_forward(params, h0)
  return logits


@dataclasses.dataclass
class BatchGradients:
  """Factored per-example gradients of a minibatch.

  The dense gradient of example ``i`` for layer ``l`` is
  ``outer(inputs[l][i], deltas[l][i])`` (bias: ``deltas[l][i]``). The
  embedding gradient of example ``i`` for feature ``f`` has the row
  ``pooled_grads[f][i]`` at every bucket the example activates.
  """
  params: ModelParams
  batch: Batch
  losses: np.ndarray
  inputs: list[np.ndarray]
  deltas: list[np.ndarray]
  pooled_grads: list[np.ndarray]

  def dense_sq_norms(self) -> np.ndarray:
    total = np.zeros(len(self.batch))
    for a, d in zip(self.inputs, self.deltas):
      dd = np.sum(d * d, axis=1)
      total += np.sum(a * a, axis=1) * dd + dd
    return total

  def active_entries(self, f: int) -> np.ndarray:
    """Boolean mask over ``batch.indices[f]`` of entries with nonzero rows."""
    nonzero = np.any(self.pooled_grads[f] != 0, axis=1)
    return nonzero[self.batch.owners(f)]

  def embedding_sq_norms(self, keep: Sequence[np.ndarray]) -> np.ndarray:
    """Per-example squared embedding norm counting only ``keep`` entries."""
    total = np.zeros(len(self.batch))
    for f, k in enumerate(keep):
      owners = self.batch.owners(f)
      counts = np.bincount(owners[k], minlength=len(self.batch))
      total += counts * np.sum(self.pooled_grads[f] ** 2, axis=1)
    return total

  def weighted_sum(self, weights: np.ndarray,
                   keep: Sequence[np.ndarray]) -> PerExampleGradient:
    """Computes ``sum_i weights[i] * g_i`` with embedding entries masked."""
    dense_w = [a.T @ (d * weights[:, None])
               for a, d in zip(self.inputs, self.deltas)]
    dense_b = [np.sum(d * weights[:, None], axis=0) for d in self.deltas]
    embedding = []
    for f, k in enumerate(keep):
      owners = self.batch.owners(f)[k]
      rows = self.batch.indices[f][k]
      vals = self.pooled_grads[f][owners] * weights[owners, None]
      embedding.append(RowSparseGradient.from_entries(
          self.params.tables[f].shape, rows, vals))
    return PerExampleGradient(embedding, dense_w, dense_b)


def batch_gradients(params: ModelParams, batch: Batch) -> BatchGradients:
  """Forward and backward pass over a whole minibatch."""
  pooled = [_pool(t, s, p, i) for t, s, p, i in zip(
      params.tables, params.features, batch.indptr, batch.indices)]
  h0 = np.concatenate([*pooled, batch.numeric], axis=1)
  logits, inputs, pre = _head_forward(params, h0)
  losses = bce_with_logits(logits, batch.labels)
  dlogit = sigmoid(logits) - batch.labels
  deltas, dh0 = _head_backward(params, pre, dlogit)
  if not (np.all(np.isfinite(losses)) and np.all(np.isfinite(dh0))):
    raise NumericError("non-finite value in batch backward pass")
  pooled_grads = []
  offset = 0
  for f, spec in enumerate(params.features):
    dz = dh0[:, offset:offset + spec.embedding_dim]
    offset += spec.embedding_dim
    if spec.pooling == "mean":
      dz = dz / np.diff(batch.indptr[f])[:, None]
    pooled_grads.append(dz)
  return BatchGradients(params, batch, losses, inputs, deltas, pooled_grads)
