"""Batch and streaming experiment drivers, grid sweeps and result files.

Every run is a pure function of (dataset, configuration, seed): all
randomness comes from ``RngStreams(seed)`` and timings are the only fields
that differ between repeated runs.

Privacy bookkeeping:

* ``delta`` defaults to ``1 / N`` with ``N`` the number of training rows.
* Selection for ``dpfest`` and ``adafest_plus`` costs
  ``config.dpfest_epsilon`` (pure DP) unless frequencies are public or the
  selection epsilon is infinite; it is subtracted from the total budget
  before the training noise is calibrated.
* Fixed-size shuffled batches are accounted as Poisson sampling with rate
  ``B / N``.
"""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import functools
import itertools
import math
import time
from typing import Iterable, Iterator, Sequence

import numpy as np

from sparsedp import dp_optimizers, privacy_accountant
from sparsedp.dp_mechanisms import NoiseConfig, RngStreams
from sparsedp.dp_optimizers import OptimizerConfig, SelectedVocabulary
from sparsedp.harness import metrics
from sparsedp.harness.data import Dataset
from sparsedp.privacy_accountant import BudgetSpec
from sparsedp.sparse_model import (Batch, FeatureSpec, ModelParams,
                                   batch_logits, init_params)

RESULT_FIELDS = ("algorithm", "epsilon", "delta", "sigma1", "sigma2", "tau",
                 "c1", "c2", "k", "accuracy", "auc", "mean_noised_coords",
                 "reduction_factor", "wall_ms")
FRONTIER_FIELDS = ("epsilon", "algorithm", "utility_loss", "baseline_accuracy",
                   "best_reduction_factor", "best_embedding_reduction_factor")
DEFAULT_LOSS_THRESHOLDS = (0.0, 0.0025, 0.005, 0.01, 0.02, 0.05, 0.1)
DEFAULT_SIGMA_RATIO = 5.0
ADAPTIVE = ("adafest", "adafest_plus")
SELECTING = ("dpfest", "adafest_plus")
SOURCE_ALIASES = {"public": "public_prior", "first": "first_period",
                  "all": "all_periods"}


@dataclasses.dataclass(frozen=True)
class ModelConfig:
  embedding_dim: int = 8
  hidden: tuple[int, ...] = (64, 64)


@dataclasses.dataclass(frozen=True)
class StreamingConfig:
  """Streaming protocol.

  The dataset is cut into ``period_count`` contiguous periods. The last
  ``eval_periods`` are held out; the model is refreshed once per
  ``period_len`` training periods.
  """
  period_count: int
  period_len: int = 1
  frequency_source: str = "streaming"
  eval_periods: int = 1

  def __post_init__(self):
    if self.period_len < 1:
      raise ValueError("period_len must be >= 1")
    if self.eval_periods < 1 or self.period_count < self.eval_periods + 1:
      raise ValueError("need at least one training and one evaluation period")
    source = SOURCE_ALIASES.get(self.frequency_source, self.frequency_source)
    if source not in dp_optimizers.FREQUENCY_SOURCES:
      raise ValueError(f"unknown frequency source {self.frequency_source!r}")
    object.__setattr__(self, "frequency_source", source)

  @property
  def train_periods(self) -> int:
    return self.period_count - self.eval_periods


@dataclasses.dataclass
class ExperimentRecord:
  """Outcome of one training run.

  ``reduction_factor`` compares all parameters against the mean number of
  noised coordinates per step; ``embedding_reduction_factor`` does the same
  for the embedding tables alone (``inf`` when nothing was noised there).
  """
  algorithm: str
  epsilon: float
  delta: float
  sigma1: float
  sigma2: float
  tau: float
  c1: float
  c2: float
  k: int
  accuracy: float
  auc: float
  mean_noised_coords: float
  reduction_factor: float
  wall_ms: float
  mean_embedding_coords: float = 0.0
  embedding_reduction_factor: float = math.inf
  lr: float = 1.0
  sigma_ratio: float = DEFAULT_SIGMA_RATIO
  steps: int = 0
  batch_size: int = 0
  seed: int = 0
  frequency_source: str = ""
  period: int | None = None
  num_params: int = 0
  embedding_params: int = 0

  def csv_row(self) -> dict:
    return {f: getattr(self, f) for f in RESULT_FIELDS}

  def without_timing(self) -> "ExperimentRecord":
    return dataclasses.replace(self, wall_ms=0.0)


# ---------------------------------------------------------------------------
# Calibration.


@functools.lru_cache(maxsize=256)
def _calibrated_sigma(epsilon: float, delta: float, gamma: float,
                      steps: int) -> float:
  return privacy_accountant.calibrate_sigma(epsilon, delta, gamma, steps)


def selection_epsilon(config: OptimizerConfig) -> float:
  """Budget consumed by private vocabulary selection."""
  if (config.algorithm not in SELECTING or
      config.frequency_source == "public_prior" or
      math.isinf(config.dpfest_epsilon)):
    return 0.0
  return config.dpfest_epsilon


def calibrate_noise(config: OptimizerConfig, budget: BudgetSpec, n_train: int,
                    sigma_ratio: float = DEFAULT_SIGMA_RATIO,
                    steps: int | None = None) -> tuple[float, float]:
  """Noise multipliers ``(sigma1, sigma2)`` meeting the training budget.

  ``sigma1`` is zero for the non-adaptive algorithms. An infinite budget
  (or ``sgd``) yields zero noise.
  """
  if config.algorithm == "sgd":
    return 0.0, 0.0
  sel = selection_epsilon(config)
  train_eps = budget.epsilon - sel
  if not train_eps > 0:
    raise ValueError("selection epsilon exhausts the budget")
  if math.isinf(train_eps):
    return 0.0, 0.0
  steps = config.steps if steps is None else steps
  gamma = min(1.0, config.batch_size / n_train)
  sigma = _calibrated_sigma(float(train_eps), float(budget.delta), gamma,
                            int(steps))
  if config.algorithm in ADAPTIVE:
    return privacy_accountant.split_sigma(sigma, sigma_ratio)
  return 0.0, sigma


# ---------------------------------------------------------------------------
# Training loop.


def _batches(n: int, batch_size: int, sampling: str,
             rng: np.random.Generator) -> Iterator[np.ndarray]:
  if sampling == "poisson":
    rate = min(1.0, batch_size / n)
    while True:
      yield np.flatnonzero(rng.random(n) < rate)
  batch_size = min(batch_size, n)
  while True:
    perm = rng.permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
      yield perm[start:start + batch_size]


def train(params: ModelParams, data: Batch, config: OptimizerConfig,
          noise: NoiseConfig, steps: int, streams: RngStreams,
          selected: SelectedVocabulary | None = None
         ) -> list[dp_optimizers.StepReport]:
  """Runs ``steps`` optimizer steps on ``data`` in place."""
  algo = config.algorithm
  if algo in SELECTING and selected is None:
    raise ValueError(f"{algo} needs a selected vocabulary")
  denominator = float(config.batch_size) if config.sampling == "poisson" else None
  noise_rng = streams["mechanism-noise"]
  contribution_rng = streams["contribution-noise"]
  sampler = _batches(len(data), config.batch_size, config.sampling,
                     streams["sampling"])
  reports = []
  for _ in range(steps):
    batch = data.take(next(sampler))
    if algo == "sgd":
      _, report = dp_optimizers.sgd_step(params, batch, config.lr, denominator)
    elif algo == "dpsgd":
      _, report = dp_optimizers.dpsgd_step(params, batch, noise.c2,
                                           noise.sigma2, config.lr, noise_rng,
                                           denominator)
    elif algo == "dpfest":
      _, report = dp_optimizers.dpfest_step(params, batch, selected, noise.c2,
                                            noise.sigma2, config.lr, noise_rng,
                                            denominator)
    elif algo == "adafest":
      _, report = dp_optimizers.adafest_step(params, batch, noise, config.lr,
                                             noise_rng, contribution_rng,
                                             config.mask_sampler, denominator)
    else:
      _, report = dp_optimizers.adafest_plus_step(params, batch, selected,
                                                  noise, config.lr, noise_rng,
                                                  contribution_rng,
                                                  config.mask_sampler,
                                                  denominator)
    reports.append(report)
  return reports


def _select(frequencies, config: OptimizerConfig, epsilon: float,
            rng: np.random.Generator) -> SelectedVocabulary:
  if config.dpfest_k <= 0:
    raise ValueError(f"{config.algorithm} needs dpfest_k > 0")
  public = config.frequency_source == "public_prior" or math.isinf(epsilon)
  return dp_optimizers.dpfest_select(frequencies, config.dpfest_k,
                                     None if public else epsilon, rng)


def split_rows(n: int, eval_fraction: float) -> tuple[np.ndarray, np.ndarray]:
  """Contiguous train prefix and evaluation suffix."""
  if not 0 < eval_fraction < 1:
    raise ValueError("eval_fraction must lie in (0, 1)")
  n_eval = max(1, int(round(n * eval_fraction)))
  if n_eval >= n:
    raise ValueError("dataset too small to split")
  return np.arange(n - n_eval), np.arange(n - n_eval, n)


def _new_params(dataset: Dataset, model: ModelConfig,
                streams: RngStreams) -> ModelParams:
  features = [FeatureSpec(f, c, model.embedding_dim)
              for f, c in enumerate(dataset.vocab_sizes)]
  return init_params(features, dataset.n_numeric, model.hidden,
                     rng=streams["init"])


def _record(params: ModelParams, reports, eval_data: Batch,
            config: OptimizerConfig, noise: NoiseConfig, budget: BudgetSpec,
            sigma_ratio: float, seed: int, wall: float,
            period: int | None = None) -> ExperimentRecord:
  logits = batch_logits(params, eval_data)
  noised = float(np.mean([r.noised_coordinate_count for r in reports]))
  emb = float(np.mean([r.embedding_coordinates for r in reports]))
  private = config.algorithm != "sgd"
  return ExperimentRecord(
      algorithm=config.algorithm,
      epsilon=budget.epsilon if private else math.inf,
      delta=budget.delta if private else 0.0,
      sigma1=noise.sigma1, sigma2=noise.sigma2,
      tau=noise.tau if config.algorithm in ADAPTIVE else 0.0,
      c1=noise.c1 if config.algorithm in ADAPTIVE else 0.0,
      c2=noise.c2 if private else math.inf,
      k=config.dpfest_k if config.algorithm in SELECTING else 0,
      accuracy=metrics.accuracy(eval_data.labels, logits),
      auc=metrics.auc(eval_data.labels, logits),
      mean_noised_coords=noised,
      reduction_factor=params.num_params / noised if noised else math.inf,
      wall_ms=1e3 * wall,
      mean_embedding_coords=emb,
      embedding_reduction_factor=(params.embedding_size / emb if emb
                                  else math.inf),
      lr=config.lr,
      sigma_ratio=sigma_ratio if config.algorithm in ADAPTIVE else 0.0,
      steps=len(reports), batch_size=config.batch_size, seed=seed,
      frequency_source=(config.frequency_source
                        if config.algorithm in SELECTING else ""),
      period=period, num_params=params.num_params,
      embedding_params=params.embedding_size)


def run_experiment(dataset: Dataset,
                   config: OptimizerConfig,
                   budget: BudgetSpec | None = None,
                   *,
                   eval_fraction: float = 0.2,
                   sigma_ratio: float = DEFAULT_SIGMA_RATIO,
                   model: ModelConfig = ModelConfig(),
                   seed: int = 0,
                   periods: int = 1,
                   sigmas: tuple[float, float] | None = None
                  ) -> ExperimentRecord:
  """Trains on a train prefix and evaluates on the held-out suffix.

  Args:
    dataset: the data; the last ``eval_fraction`` of rows is held out.
    config: optimizer configuration. Its ``noise`` supplies ``c1``, ``c2``
      and ``tau``; the noise multipliers are calibrated from ``budget``.
    budget: total privacy budget; defaults to ``epsilon=1, delta=1/N``.
    eval_fraction: held-out fraction.
    sigma_ratio: ``sigma1 / sigma2`` for the adaptive algorithms.
    model: architecture.
    seed: seed of all random streams.
    periods: number of contiguous periods the training rows are cut into;
      only used by the ``first_period`` frequency source.
    sigmas: explicit ``(sigma1, sigma2)``, bypassing calibration.
  """
  train_rows, eval_rows = split_rows(len(dataset), eval_fraction)
  n_train = len(train_rows)
  if budget is None:
    budget = BudgetSpec(1.0, 1.0 / n_train)
  streams = RngStreams(seed)
  params = _new_params(dataset, model, streams)
  train_data = dataset.data.take(train_rows)
  eval_data = dataset.data.take(eval_rows)

  if sigmas is None:
    sigmas = calibrate_noise(config, budget, n_train, sigma_ratio)
  noise = dataclasses.replace(config.noise, sigma1=sigmas[0], sigma2=sigmas[1])

  selected = None
  if config.algorithm in SELECTING:
    if config.frequency_source == "first_period":
      first = np.array_split(np.arange(n_train), periods)[0]
      freq_data = train_data.take(first)
    else:
      freq_data = train_data
    freqs = dp_optimizers.bucket_frequencies(freq_data, dataset.vocab_sizes)
    selected = _select(freqs, config, config.dpfest_epsilon, streams["gumbel"])

  start = time.perf_counter()
  reports = train(params, train_data, config, noise, config.steps, streams,
                  selected)
  wall = time.perf_counter() - start
  return _record(params, reports, eval_data, config, noise, budget,
                 sigma_ratio, seed, wall)


# ---------------------------------------------------------------------------
# Streaming.


def period_frequencies(dataset: Dataset, period_rows: Sequence[np.ndarray]
                      ) -> list[list[np.ndarray]]:
  """Bucket counts of every period, per feature."""
  return [dp_optimizers.bucket_frequencies(dataset.data.take(rows),
                                           dataset.vocab_sizes)
          for rows in period_rows]


def running_frequencies(per_period: Sequence[Sequence[np.ndarray]]
                       ) -> list[list[np.ndarray]]:
  """Cumulative counts: entry ``r`` sums periods ``0..r``."""
  out, acc = [], None
  for counts in per_period:
    acc = ([c.copy() for c in counts] if acc is None else
           [a + c for a, c in zip(acc, counts)])
    out.append([a.copy() for a in acc])
  return out


def apportion(total: int, sizes: Sequence[int]) -> list[int]:
  """Splits ``total`` proportionally to ``sizes`` (largest remainder).

  Every part gets at least one step, so the sum exceeds ``total`` only when
  ``total < len(sizes)``.
  """
  quotas = total * np.asarray(sizes, dtype=np.float64) / np.sum(sizes)
  parts = np.floor(quotas).astype(int)
  order = np.argsort(-(quotas - parts), kind="stable")
  parts[order[:total - parts.sum()]] += 1
  return [max(1, int(p)) for p in parts]


def run_streaming(dataset: Dataset,
                  streaming: StreamingConfig,
                  config: OptimizerConfig,
                  budget: BudgetSpec | None = None,
                  *,
                  sigma_ratio: float = DEFAULT_SIGMA_RATIO,
                  model: ModelConfig = ModelConfig(),
                  seed: int = 0) -> list[ExperimentRecord]:
  """Trains through the training periods, refreshing per streaming period.

  Chunk ``r`` covers training periods ``[r L, (r+1) L)``. Its share of the
  ``config.steps`` steps is proportional to its size. Chunks are disjoint, so
  each is calibrated to the full training budget on its own rows (parallel
  composition). After every refresh the model is evaluated on the held-out
  suffix periods and one record is emitted.

  Frequency sources for selecting algorithms:
    ``first_period``: counts of period 0, selected once.
    ``all_periods`` and ``dp_topk``: counts of all training periods,
      selected once.
    ``streaming``: running counts through the current chunk, reselected at
      every refresh with the selection budget split across refreshes.
    ``public_prior``: exact top-k of all training counts.
  """
  periods = dataset.periods(streaming.period_count)
  train_periods = periods[:streaming.train_periods]
  eval_rows = np.concatenate(periods[streaming.train_periods:])
  chunks = [np.concatenate(train_periods[i:i + streaming.period_len])
            for i in range(0, len(train_periods), streaming.period_len)]
  n_train = sum(len(c) for c in chunks)
  if budget is None:
    budget = BudgetSpec(1.0, 1.0 / n_train)
  source = streaming.frequency_source
  config = dataclasses.replace(config, frequency_source=source)
  streams = RngStreams(seed)
  params = _new_params(dataset, model, streams)
  eval_data = dataset.data.take(eval_rows)

  selecting = config.algorithm in SELECTING
  per_period = period_frequencies(dataset, train_periods) if selecting else []
  running = (running_frequencies(per_period) if selecting else [])
  # Last period index included in each chunk.
  chunk_end = [min(i + streaming.period_len, len(train_periods)) - 1
               for i in range(0, len(train_periods), streaming.period_len)]
  sel_eps = config.dpfest_epsilon
  if source == "streaming":
    sel_eps = config.dpfest_epsilon / len(chunks)
  selected = None
  if selecting and source in ("first_period", "all_periods", "dp_topk",
                              "public_prior"):
    freqs = per_period[0] if source == "first_period" else running[-1]
    selected = _select(freqs, config, sel_eps, streams["gumbel"])

  records = []
  chunk_steps = apportion(config.steps, [len(c) for c in chunks])
  for r, (rows, steps) in enumerate(zip(chunks, chunk_steps)):
    sigmas = calibrate_noise(config, budget, len(rows), sigma_ratio, steps)
    noise = dataclasses.replace(config.noise, sigma1=sigmas[0],
                                sigma2=sigmas[1])
    if selecting and source == "streaming":
      selected = _select(running[chunk_end[r]], config, sel_eps,
                         streams["gumbel"])
    start = time.perf_counter()
    reports = train(params, dataset.data.take(rows), config, noise, steps,
                    streams, selected)
    wall = time.perf_counter() - start
    records.append(_record(params, reports, eval_data, config, noise, budget,
                           sigma_ratio, seed, wall, period=r))
  return records


# ---------------------------------------------------------------------------
# Sweeps.

GRID_KEYS = {
    "algo": str, "epsilon": float, "delta": float, "sigma_ratio": float,
    "tau": float, "c1": float, "c2": float, "k": int, "lr": float,
    "batch": int, "steps": int, "freq_source": str, "seed": int,
    "dpfest_epsilon": float, "sampling": str,
}
GRID_DEFAULTS = {
    "algo": "adafest", "epsilon": 1.0, "delta": None,
    "sigma_ratio": DEFAULT_SIGMA_RATIO, "tau": 10.0, "c1": 1.0, "c2": 1.0,
    "k": 0, "lr": 1.0, "batch": 1024, "steps": 500, "freq_source": "dp_topk",
    "seed": 0, "dpfest_epsilon": 0.01, "sampling": "shuffle",
}
# Keys that do not influence a given algorithm; collapsed before dedup.
_IRRELEVANT = {
    "sgd": ("epsilon", "delta", "sigma_ratio", "tau", "c1", "c2", "k",
            "freq_source", "dpfest_epsilon"),
    "dpsgd": ("sigma_ratio", "tau", "c1", "k", "freq_source",
              "dpfest_epsilon"),
    "dpfest": ("sigma_ratio", "tau", "c1"),
    "adafest": ("k", "freq_source", "dpfest_epsilon"),
    "adafest_plus": (),
}


def parse_grid(text: str) -> dict[str, list]:
  """Parses ``key=v1,v2,...`` lines; blank lines and ``#`` comments skipped."""
  grid = {}
  for lineno, line in enumerate(text.splitlines(), 1):
    line = line.split("#", 1)[0].strip()
    if not line:
      continue
    key, sep, values = line.partition("=")
    key = key.strip().replace("-", "_")
    if not sep or key not in GRID_KEYS:
      raise ValueError(f"line {lineno}: expected key=value with a known key")
    cast = GRID_KEYS[key]
    parsed = [cast(float(v)) if cast is int else cast(v.strip())
              for v in values.split(",") if v.strip()]
    if not parsed:
      raise ValueError(f"line {lineno}: no values for {key}")
    grid[key] = parsed
  if not grid:
    raise ValueError("empty grid")
  return grid


def expand_grid(grid: dict[str, list]) -> list[dict]:
  """Cartesian product of the grid with irrelevant keys collapsed."""
  keys = list(GRID_KEYS)
  values = [grid.get(k, [GRID_DEFAULTS[k]]) for k in keys]
  cells, seen = [], set()
  for combo in itertools.product(*values):
    cell = dict(zip(keys, combo))
    if cell["algo"] not in _IRRELEVANT:
      raise ValueError(f"unknown algorithm {cell['algo']!r}")
    for k in _IRRELEVANT[cell["algo"]]:
      cell[k] = GRID_DEFAULTS[k]
    cell["freq_source"] = SOURCE_ALIASES.get(cell["freq_source"],
                                             cell["freq_source"])
    key = tuple(cell[k] for k in keys)
    if key not in seen:
      seen.add(key)
      cells.append(cell)
  return cells


def cell_config(cell: dict) -> OptimizerConfig:
  return OptimizerConfig(
      algorithm=cell["algo"], lr=cell["lr"], batch_size=cell["batch"],
      steps=cell["steps"],
      noise=NoiseConfig(c1=cell["c1"], c2=cell["c2"], tau=cell["tau"]),
      dpfest_k=cell["k"], dpfest_epsilon=cell["dpfest_epsilon"],
      frequency_source=cell["freq_source"], sampling=cell["sampling"])


def run_cell(dataset: Dataset, cell: dict, **kwargs) -> ExperimentRecord:
  """Runs one expanded grid cell; a missing delta means ``1 / N``."""
  n_train = len(split_rows(len(dataset), kwargs.get("eval_fraction", 0.2))[0])
  delta = 1.0 / n_train if cell["delta"] is None else cell["delta"]
  return run_experiment(dataset, cell_config(cell),
                        BudgetSpec(cell["epsilon"], delta),
                        sigma_ratio=cell["sigma_ratio"], seed=cell["seed"],
                        **kwargs)


def sweep(grid: dict[str, list], dataset: Dataset,
          budget: BudgetSpec | None = None, *, workers: int = 1,
          **kwargs) -> list[ExperimentRecord]:
  """One record per distinct grid cell, in grid order.

  A grid ``epsilon``/``delta`` entry overrides ``budget``. Cells are
  independent and can run in ``workers`` processes.
  """
  cells = expand_grid(grid)
  if budget is not None:
    for cell in cells:
      if "epsilon" not in grid:
        cell["epsilon"] = budget.epsilon
      if "delta" not in grid:
        cell["delta"] = budget.delta
  if workers <= 1:
    return [run_cell(dataset, cell, **kwargs) for cell in cells]
  with concurrent.futures.ProcessPoolExecutor(workers) as pool:
    futures = [pool.submit(run_cell, dataset, cell, **kwargs)
               for cell in cells]
    return [f.result() for f in futures]


_SEED_FREE = ("algorithm", "epsilon", "delta", "sigma1", "sigma2", "tau",
              "c1", "c2", "k", "lr", "sigma_ratio", "steps", "batch_size",
              "frequency_source", "period")


def average_seeds(records: Iterable[ExperimentRecord]
                 ) -> list[ExperimentRecord]:
  """Merges records that differ only in their seed.

  Accuracy, AUC, wall time and noised-coordinate counts are averaged; the
  reduction factors are recomputed from the averaged counts. The merged
  record keeps the smallest seed.
  """
  groups: dict[tuple, list[ExperimentRecord]] = {}
  for r in records:
    groups.setdefault(tuple(getattr(r, f) for f in _SEED_FREE), []).append(r)
  out = []
  for rs in groups.values():
    noised = float(np.mean([r.mean_noised_coords for r in rs]))
    emb = float(np.mean([r.mean_embedding_coords for r in rs]))
    first = min(rs, key=lambda r: r.seed)
    out.append(dataclasses.replace(
        first,
        accuracy=float(np.mean([r.accuracy for r in rs])),
        auc=float(np.mean([r.auc for r in rs])),
        wall_ms=float(np.mean([r.wall_ms for r in rs])),
        mean_noised_coords=noised,
        mean_embedding_coords=emb,
        reduction_factor=first.num_params / noised if noised else math.inf,
        embedding_reduction_factor=(first.embedding_params / emb if emb
                                    else math.inf)))
  return out


def frontier(records: Iterable[ExperimentRecord],
             thresholds: Sequence[float] = DEFAULT_LOSS_THRESHOLDS,
             baseline: str = "dpsgd") -> list[dict]:
  """Best reduction per algorithm at each allowed utility loss.

  Records are first averaged over seeds. Utility loss is measured against
  the most accurate ``baseline`` configuration of the same epsilon. A
  threshold with no admissible configuration reports 0.
  """
  records = average_seeds(records)
  rows = []
  for eps in sorted({r.epsilon for r in records if r.algorithm != "sgd"}):
    group = [r for r in records if r.epsilon == eps]
    base = [r.accuracy for r in group if r.algorithm == baseline]
    if not base:
      raise ValueError(f"no {baseline} record at epsilon={eps}")
    base_acc = max(base)
    algos = sorted({r.algorithm for r in group} - {baseline, "sgd"})
    for algo in algos:
      mine = [r for r in group if r.algorithm == algo]
      for t in sorted(thresholds):
        ok = [r for r in mine if r.accuracy >= base_acc - t]
        rows.append({
            "epsilon": eps, "algorithm": algo, "utility_loss": t,
            "baseline_accuracy": base_acc,
            "best_reduction_factor": max((r.reduction_factor for r in ok),
                                         default=0.0),
            "best_embedding_reduction_factor": max(
                (r.embedding_reduction_factor for r in ok), default=0.0),
        })
  return rows


def write_records(path: str, records: Iterable[ExperimentRecord]) -> None:
  with open(path, "w", encoding="utf-8", newline="") as fh:
    writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
    writer.writeheader()
    for r in records:
      writer.writerow(r.csv_row())


def read_records(path: str) -> list[dict]:
  with open(path, encoding="utf-8", newline="") as fh:
    return list(csv.DictReader(fh))


def write_frontier(path: str, rows: Iterable[dict]) -> None:
  with open(path, "w", encoding="utf-8", newline="") as fh:
    writer = csv.DictWriter(fh, fieldnames=FRONTIER_FIELDS)
    writer.writeheader()
    writer.writerows(rows)


def frontier_path(results_path: str) -> str:
  stem = results_path[:-4] if results_path.endswith(".csv") else results_path
  return stem + "_frontier.csv"
