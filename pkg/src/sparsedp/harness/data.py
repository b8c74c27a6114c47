"""Synthetic click-log style datasets.

Each categorical feature draws its bucket from a finite Zipf law over the
vocabulary. Bucket ranks are mapped to bucket ids through a fixed random
permutation per feature; a drift event shifts every id cyclically from a
given period on, so the popular buckets reappear under new ids.

Labels come from a planted logistic teacher whose categorical signal lives
on the ``hot_buckets`` most frequent ranks of every feature, plus a linear
term in the standardized log1p numeric features. An intercept centres the
logits so the classes are roughly balanced.

File format: a header line, then ``label,num_0..num_{k-1},cat_0..cat_{p-1}``
rows where each ``cat`` field is a ``;``-separated list of bucket ids. The
generating spec is stored next to the file as ``<file>.spec.json`` so that
vocabulary sizes survive the round trip.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
from typing import Sequence

import numpy as np

from sparsedp.sparse_model import Batch

NUMERIC_LOG_MEAN = 1.5


@dataclasses.dataclass
class DatasetSpec:
  n_examples: int = 50_000
  vocab_sizes: tuple[int, ...] = (20_000,) * 5
  zipf_exponent: float | tuple[float, ...] = 1.1
  n_numeric: int = 4
  buckets_per_example: int = 1
  hot_buckets: int = 20
  bucket_weight_scale: float = 4.0
  numeric_weight_scale: float = 3.0
  period_count: int = 1
  drift_period: int | None = None
  drift_shift: int | None = None
  seed: int = 0

  def __post_init__(self):
    self.vocab_sizes = tuple(int(c) for c in self.vocab_sizes)
    if isinstance(self.zipf_exponent, (list, tuple)):
      self.zipf_exponent = tuple(float(s) for s in self.zipf_exponent)
    if self.n_examples < 1 or self.period_count < 1:
      raise ValueError("need n_examples >= 1 and period_count >= 1")
    if any(s < 0 for s in self.exponents):
      raise ValueError("Zipf exponents must be nonnegative")

  @property
  def exponents(self) -> tuple[float, ...]:
    if isinstance(self.zipf_exponent, tuple):
      return self.zipf_exponent
    return (float(self.zipf_exponent),) * len(self.vocab_sizes)

  def to_json(self) -> str:
    return json.dumps(dataclasses.asdict(self), indent=2)

  @classmethod
  def from_json(cls, text: str) -> "DatasetSpec":
    fields = {f.name for f in dataclasses.fields(cls)}
    raw = json.loads(text)
    unknown = set(raw) - fields
    if unknown:
      raise ValueError(f"unknown dataset spec keys: {sorted(unknown)}")
    return cls(**raw)


def zipf_probabilities(c: int, s: float) -> np.ndarray:
  """``p_k`` proportional to ``k^-s`` over ranks ``k = 1..c``."""
  w = np.arange(1, c + 1, dtype=np.float64) ** -s
  return w / w.sum()


@dataclasses.dataclass
class Dataset:
  """In-memory dataset; ``data`` holds log1p numerics and CSR buckets."""
  data: Batch
  vocab_sizes: tuple[int, ...]
  numeric_raw: np.ndarray | None = None
  teacher_logits: np.ndarray | None = None

  def __len__(self) -> int:
    return len(self.data)

  @property
  def n_numeric(self) -> int:
    return self.data.numeric.shape[1]

  def take(self, rows) -> "Dataset":
    rows = np.asarray(rows, dtype=np.int64)
    return Dataset(self.data.take(rows), self.vocab_sizes,
                   None if self.numeric_raw is None else self.numeric_raw[rows],
                   None if self.teacher_logits is None else
                   self.teacher_logits[rows])

  def periods(self, count: int) -> list[np.ndarray]:
    """Contiguous, near-equal row ranges."""
    return np.array_split(np.arange(len(self)), count)


def generate(spec: DatasetSpec) -> Dataset:
  """Draws a dataset; deterministic given ``spec.seed``."""
  rng = np.random.default_rng(spec.seed)
  n, p = spec.n_examples, len(spec.vocab_sizes)
  period_of = np.repeat(np.arange(spec.period_count),
                        [len(a) for a in np.array_split(np.arange(n),
                                                        spec.period_count)])
  drifted = (np.zeros(n, dtype=bool) if spec.drift_period is None else
             period_of >= spec.drift_period)

  numeric_raw = np.floor(np.exp(rng.normal(NUMERIC_LOG_MEAN, 1.0,
                                           size=(n, spec.n_numeric))))
  numeric = np.log1p(numeric_raw)
  z_num = (numeric - numeric.mean(axis=0)) / (numeric.std(axis=0) + 1e-12)
  numeric_weights = rng.normal(0.0, spec.numeric_weight_scale, spec.n_numeric)
  logits = z_num @ numeric_weights

  indptr, indices = [], []
  for f, (c, s) in enumerate(zip(spec.vocab_sizes, spec.exponents)):
    perm = rng.permutation(c)
    hot = min(spec.hot_buckets, c)
    rank_weight = np.zeros(c)
    rank_weight[:hot] = rng.normal(0.0, spec.bucket_weight_scale, hot)
    ranks = rng.choice(c, size=(n, spec.buckets_per_example),
                       p=zipf_probabilities(c, s))
    shift = c // 2 if spec.drift_shift is None else spec.drift_shift
    ids = perm[ranks]
    ids[drifted] = (ids[drifted] + shift) % c
    if spec.buckets_per_example == 1:
      flat = ids[:, 0].astype(np.int64)
      lengths = np.ones(n, dtype=np.int64)
      logits += rank_weight[ranks[:, 0]]
    else:
      per_example = [np.unique(row) for row in ids]
      flat = np.concatenate(per_example).astype(np.int64)
      lengths = np.array([len(r) for r in per_example])
      logits += np.array([rank_weight[np.unique(r)].sum() for r in ranks])
    indptr.append(np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64))
    indices.append(flat)

  logits -= logits.mean()
  labels = (rng.random(n) < 1.0 / (1.0 + np.exp(-logits))).astype(np.float64)
  return Dataset(Batch(labels, numeric, indptr, indices), spec.vocab_sizes,
                 numeric_raw, logits)


def write_dataset(dataset: Dataset, path: str,
                  spec: DatasetSpec | None = None) -> None:
  data = dataset.data
  k, p = dataset.n_numeric, len(data.indptr)
  raw = (dataset.numeric_raw if dataset.numeric_raw is not None else
         np.expm1(data.numeric))
  buf = io.StringIO()
  buf.write(",".join(["label"] + [f"num_{i}" for i in range(k)] +
                     [f"cat_{f}" for f in range(p)]) + "\n")
  cats = []
  for ptr, idx in zip(data.indptr, data.indices):
    s = idx.astype(str)
    if np.all(np.diff(ptr) == 1):
      cats.append(s)
    else:
      cats.append(np.array([";".join(s[a:b]) for a, b in zip(ptr[:-1],
                                                               ptr[1:])]))
  nums = [np.char.mod("%.17g", raw[:, i]) for i in range(k)]
  labels = data.labels.astype(int).astype(str)
  for i in range(len(data)):
    buf.write(",".join([labels[i], *(col[i] for col in nums),
                        *(col[i] for col in cats)]) + "\n")
  with open(path, "w", encoding="utf-8", newline="") as fh:
    fh.write(buf.getvalue())
  if spec is None:
    spec_dict = {"vocab_sizes": list(dataset.vocab_sizes)}
  else:
    spec_dict = dataclasses.asdict(spec)
  with open(path + ".spec.json", "w", encoding="utf-8") as fh:
    json.dump(spec_dict, fh, indent=2)


def read_dataset(path: str,
                 vocab_sizes: Sequence[int] | None = None) -> Dataset:
  """Reads a dataset file; numeric columns are log1p-transformed here.

  Vocabulary sizes come from ``vocab_sizes``, else from the sidecar spec,
  else from the largest bucket id seen.
  """
  with open(path, encoding="utf-8", newline="") as fh:
    reader = csv.reader(fh)
    header = next(reader)
    rows = list(reader)
  k = sum(1 for h in header if h.startswith("num_"))
  p = sum(1 for h in header if h.startswith("cat_"))
  labels = np.array([float(r[0]) for r in rows])
  numeric_raw = np.array([[float(x) for x in r[1:1 + k]] for r in rows]
                         ).reshape(len(rows), k)
  indptr, indices = [], []
  for f in range(p):
    col = 1 + k + f
    per = [np.unique(np.array(r[col].split(";"), dtype=np.int64))
           for r in rows]
    lengths = [len(b) for b in per]
    if min(lengths, default=1) == 0:
      raise ValueError(f"row without bucket in cat_{f}")
    indptr.append(np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64))
    indices.append(np.concatenate(per) if per else np.zeros(0, np.int64))
  if vocab_sizes is None and os.path.exists(path + ".spec.json"):
    with open(path + ".spec.json", encoding="utf-8") as fh:
      vocab_sizes = json.load(fh)["vocab_sizes"]
  if vocab_sizes is None:
    vocab_sizes = [int(idx.max()) + 1 if idx.size else 1 for idx in indices]
  vocab_sizes = tuple(int(c) for c in vocab_sizes)
  for idx, c in zip(indices, vocab_sizes):
    if idx.size and idx.max() >= c:
      raise ValueError("bucket id exceeds vocabulary size")
  batch = Batch(labels, np.log1p(numeric_raw), indptr, indices)
  return Dataset(batch, vocab_sizes, numeric_raw)


def generate_dataset(spec: DatasetSpec, path: str) -> Dataset:
  dataset = generate(spec)
  write_dataset(dataset, path, spec)
  return dataset
