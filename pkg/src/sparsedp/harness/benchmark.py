"""Wall-clock comparison of dense and row-sparse noisy embedding updates.

Both paths apply the same minibatch gradient (``B`` rows of a ``c x d``
float32 table) plus Gaussian noise:

* dense: noise is drawn for every row (in chunks, to bound memory) and the
  whole table is rewritten, then the gradient rows are scattered in;
* sparse: noise is drawn only for the touched rows and one scatter update
  writes gradient plus noise.
"""

from __future__ import annotations

import csv
import dataclasses
import time
from typing import Sequence

import numpy as np

BENCHMARK_FIELDS = ("vocab_size", "dim", "batch", "trials", "dense_ms",
                    "sparse_ms", "reduction_factor")
DENSE_CHUNK_ROWS = 1 << 16
NOISE_STD = 1e-3
LR = 0.1


@dataclasses.dataclass
class BenchmarkResult:
  vocab_size: int
  dim: int
  batch: int
  trials: int
  dense_ms: float
  sparse_ms: float

  @property
  def reduction_factor(self) -> float:
    return self.dense_ms / self.sparse_ms

  def csv_row(self) -> dict:
    row = dataclasses.asdict(self)
    row["reduction_factor"] = self.reduction_factor
    return row


def dense_update(table: np.ndarray, rows: np.ndarray, grad: np.ndarray,
                 rng: np.random.Generator) -> None:
  c = table.shape[0]
  for start in range(0, c, DENSE_CHUNK_ROWS):
    block = table[start:start + DENSE_CHUNK_ROWS]
    noise = rng.standard_normal(block.shape, dtype=np.float32)
    block -= np.float32(LR * NOISE_STD) * noise
  table[rows] -= np.float32(LR) * grad


def sparse_update(table: np.ndarray, rows: np.ndarray, grad: np.ndarray,
                  rng: np.random.Generator) -> None:
  noise = rng.standard_normal(grad.shape, dtype=np.float32)
  table[rows] -= np.float32(LR) * (grad + np.float32(NOISE_STD) * noise)


def _time(fn, trials: int) -> float:
  """Median wall time in milliseconds."""
  samples = []
  for _ in range(trials):
    start = time.perf_counter()
    fn()
    samples.append(time.perf_counter() - start)
  return 1e3 * float(np.median(samples))


def benchmark_one(vocab_size: int, dim: int, batch: int, trials: int,
                  seed: int = 0) -> BenchmarkResult:
  rng = np.random.default_rng(seed)
  table = rng.standard_normal((vocab_size, dim), dtype=np.float32)
  rows = np.unique(rng.integers(0, vocab_size, size=batch))
  grad = rng.standard_normal((len(rows), dim), dtype=np.float32)
  noise_rng = np.random.default_rng(seed + 1)
  # One warm-up call each so page faults and caches do not bias trial one.
  dense_update(table, rows, grad, noise_rng)
  sparse_update(table, rows, grad, noise_rng)
  dense_ms = _time(lambda: dense_update(table, rows, grad, noise_rng), trials)
  sparse_ms = _time(lambda: sparse_update(table, rows, grad, noise_rng), trials)
  return BenchmarkResult(vocab_size, dim, batch, trials, dense_ms, sparse_ms)


def benchmark_updates(vocab_sizes: Sequence[int], dim: int = 64,
                      batch: int = 1024, trials: int = 100,
                      seed: int = 0) -> list[BenchmarkResult]:
  """Times both update paths for every vocabulary size, one at a time."""
  if trials < 1:
    raise ValueError("trials must be positive")
  return [benchmark_one(int(c), dim, batch, trials, seed) for c in vocab_sizes]


def write_benchmark(path: str, results: Sequence[BenchmarkResult]) -> None:
  with open(path, "w", encoding="utf-8", newline="") as fh:
    writer = csv.DictWriter(fh, fieldnames=BENCHMARK_FIELDS)
    writer.writeheader()
    for r in results:
      writer.writerow(r.csv_row())
