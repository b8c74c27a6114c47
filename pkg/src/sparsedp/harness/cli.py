"""Command line entry point: ``sparsedp <subcommand> ...``."""

from __future__ import annotations

import argparse
import sys
from typing import Sequence

from sparsedp import privacy_accountant
from sparsedp.dp_mechanisms import NoiseConfig
from sparsedp.dp_optimizers import ALGORITHMS, OptimizerConfig
from sparsedp.harness import benchmark, data, experiments
from sparsedp.privacy_accountant import BudgetSpec

FREQ_SOURCES = {"public": "public_prior", "dp_topk": "dp_topk",
                "first": "first_period", "all": "all_periods",
                "streaming": "streaming"}


def _vocab_list(text: str) -> list[int]:
  return [int(float(v)) for v in text.split(",") if v.strip()]


def _add_train_flags(p: argparse.ArgumentParser) -> None:
  p.add_argument("--data", required=True)
  p.add_argument("--algo", choices=ALGORITHMS, default="adafest")
  p.add_argument("--epsilon", type=float, default=1.0)
  p.add_argument("--delta", type=float, default=None,
                 help="defaults to 1/N for N training rows")
  p.add_argument("--sigma-ratio", type=float,
                 default=experiments.DEFAULT_SIGMA_RATIO)
  p.add_argument("--tau", type=float, default=10.0)
  p.add_argument("--c1", type=float, default=1.0)
  p.add_argument("--c2", type=float, default=1.0)
  p.add_argument("--k", type=int, default=0)
  p.add_argument("--freq-source", choices=sorted(FREQ_SOURCES),
                 default="dp_topk")
  p.add_argument("--batch", type=int, default=1024)
  p.add_argument("--steps", type=int, default=500)
  p.add_argument("--lr", type=float, default=1.0)
  p.add_argument("--seed", type=int, default=0)
  p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
  parser = argparse.ArgumentParser(
      prog="sparsedp", description="Sparse private training experiments.")
  sub = parser.add_subparsers(dest="command", required=True)

  p = sub.add_parser("generate", help="write a synthetic dataset")
  p.add_argument("--spec", default=None, help="JSON dataset spec")
  p.add_argument("--out", required=True)
  p.add_argument("--seed", type=int, default=None)

  _add_train_flags(sub.add_parser("train", help="train and evaluate once"))

  p = sub.add_parser("calibrate", help="noise multipliers for a budget")
  p.add_argument("--epsilon", type=float, required=True)
  p.add_argument("--delta", type=float, required=True)
  p.add_argument("--gamma", type=float, required=True)
  p.add_argument("--steps", type=int, required=True)
  p.add_argument("--sigma-ratio", type=float, default=0.0,
                 help="sigma1/sigma2; 0 calibrates a single noise multiplier")

  p = sub.add_parser("sweep", help="run a hyper-parameter grid")
  p.add_argument("--data", required=True)
  p.add_argument("--grid", required=True)
  p.add_argument("--out", required=True)
  p.add_argument("--workers", type=int, default=1)

  p = sub.add_parser("stream", help="streaming-period training")
  _add_train_flags(p)
  p.add_argument("--periods", type=int, required=True)
  p.add_argument("--period-len", type=int, default=1)

  p = sub.add_parser("benchmark", help="dense vs sparse update timing")
  p.add_argument("--vocab", type=_vocab_list, default=[10**5, 2 * 10**5, 10**6])
  p.add_argument("--dim", type=int, default=64)
  p.add_argument("--batch", type=int, default=1024)
  p.add_argument("--trials", type=int, default=100)
  p.add_argument("--out", required=True)
  return parser


def _config(args) -> OptimizerConfig:
  return OptimizerConfig(
      algorithm=args.algo, lr=args.lr, batch_size=args.batch,
      steps=args.steps,
      noise=NoiseConfig(c1=args.c1, c2=args.c2, tau=args.tau),
      dpfest_k=args.k, frequency_source=FREQ_SOURCES[args.freq_source])


def _budget(args, n_train: int) -> BudgetSpec:
  delta = 1.0 / n_train if args.delta is None else args.delta
  return BudgetSpec(args.epsilon, delta)


def _generate(args) -> None:
  spec = data.DatasetSpec()
  if args.spec:
    with open(args.spec, encoding="utf-8") as fh:
      spec = data.DatasetSpec.from_json(fh.read())
  if args.seed is not None:
    spec.seed = args.seed
  data.generate_dataset(spec, args.out)


def _train(args) -> None:
  dataset = data.read_dataset(args.data)
  n_train = len(experiments.split_rows(len(dataset), 0.2)[0])
  record = experiments.run_experiment(
      dataset, _config(args), _budget(args, n_train),
      sigma_ratio=args.sigma_ratio, seed=args.seed)
  experiments.write_records(args.out, [record])


def _calibrate(args) -> None:
  sigma = privacy_accountant.calibrate_sigma(args.epsilon, args.delta,
                                             args.gamma, args.steps)
  if args.sigma_ratio > 0:
    sigma1, sigma2 = privacy_accountant.split_sigma(sigma, args.sigma_ratio)
  else:
    sigma1, sigma2 = 0.0, sigma
  print("epsilon,delta,gamma,steps,sigma1,sigma2,sigma_effective")
  print(f"{args.epsilon!r},{args.delta!r},{args.gamma!r},{args.steps},"
        f"{sigma1!r},{sigma2!r},{sigma!r}")


def _sweep(args) -> None:
  dataset = data.read_dataset(args.data)
  with open(args.grid, encoding="utf-8") as fh:
    grid = experiments.parse_grid(fh.read())
  records = experiments.sweep(grid, dataset, workers=args.workers)
  experiments.write_records(args.out, records)
  if any(r.algorithm == "dpsgd" for r in records):
    experiments.write_frontier(experiments.frontier_path(args.out),
                               experiments.frontier(records))


def _stream(args) -> None:
  dataset = data.read_dataset(args.data)
  streaming = experiments.StreamingConfig(
      period_count=args.periods, period_len=args.period_len,
      frequency_source=FREQ_SOURCES[args.freq_source])
  n_train = sum(len(p) for p in
                dataset.periods(args.periods)[:streaming.train_periods])
  records = experiments.run_streaming(
      dataset, streaming, _config(args), _budget(args, n_train),
      sigma_ratio=args.sigma_ratio, seed=args.seed)
  experiments.write_records(args.out, records)


def _benchmark(args) -> None:
  results = benchmark.benchmark_updates(args.vocab, args.dim, args.batch,
                                        args.trials)
  benchmark.write_benchmark(args.out, results)


COMMANDS = {"generate": _generate, "train": _train, "calibrate": _calibrate,
            "sweep": _sweep, "stream": _stream, "benchmark": _benchmark}


def main(argv: Sequence[str] | None = None) -> int:
  args = build_parser().parse_args(argv)
  try:
    COMMANDS[args.command](args)
  except (ValueError, OSError, ArithmeticError) as err:
    print(f"error: {err}", file=sys.stderr)
    return 1
  return 0


if __name__ == "__main__":
  sys.exit(main())
