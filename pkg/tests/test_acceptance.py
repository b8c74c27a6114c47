"""Acceptance criteria, one test per criterion, each with its time limit."""
import math
import time

import numpy as np
import pytest
from scipy import stats

from helpers import (finite_difference, flat_gradient, make_params,
                     min_relu_margin, onehot_forward_backward, random_batch,
                     random_example, relative_errors, rdp_epsilon)
from sparsedp import dp_mechanisms as mech
from sparsedp import dp_optimizers as opt
from sparsedp import privacy_accountant as pa
from sparsedp import sparse_model as sm
from sparsedp.dp_mechanisms import NoiseConfig
from sparsedp.dp_optimizers import OptimizerConfig
from sparsedp.harness import benchmark, data, experiments as ex


class Timer:

  def __init__(self, limit_s):
    self.limit_s = limit_s

  def __enter__(self):
    self.start = time.perf_counter()
    return self

  def __exit__(self, *exc):
    self.elapsed = time.perf_counter() - self.start
    if exc[0] is None:
      assert self.elapsed < self.limit_s, (
          f"took {self.elapsed:.1f}s, limit {self.limit_s}s")


def _arrays(params):
  return [*params.tables, *params.weights, *params.biases]


def test_01_gradient_matches_finite_differences():
  with Timer(5):
    worst = 0.0
    checked = 0
    seed = 0
    while checked < 3:
      p = make_params(vocab=(50, 31, 17), dims=(8, 5, 3), seed=seed)
      ex_ = random_example(p, np.random.default_rng(seed))
      seed += 1
      if min_relu_margin(p, ex_) < 1e-4:
        continue  # finite differences are invalid across a ReLU kink
      analytic = flat_gradient(p, sm.per_example_gradient(p, ex_))
      errors = relative_errors(analytic, finite_difference(p, ex_))
      worst = max(worst, max(e.max() for e in errors))
      checked += 1
  print(f"worst relative error {worst:.2e}")
  assert worst < 1e-5


def test_02_embedding_matches_onehot_reference():
  with Timer(5):
    rng = np.random.default_rng(2)
    for i in range(100):
      vocab = tuple(rng.integers(1, 12, size=rng.integers(1, 4)))
      dims = tuple(rng.integers(1, 5, size=len(vocab)))
      pooling = tuple(rng.choice(sm.POOLING_MODES, size=len(vocab)))
      p = make_params(vocab=vocab, dims=dims, pooling=pooling, seed=i)
      ex_ = random_example(p, rng)
      logit, tables, gw, gb = onehot_forward_backward(p, ex_)
      assert abs(sm.forward(p, ex_)[0] - logit) < 1e-10
      g = sm.per_example_gradient(p, ex_)
      for a, b in zip(g.embedding, tables):
        np.testing.assert_allclose(a.to_dense(), b, rtol=0, atol=1e-10)
      for a, b in zip(g.weights + g.biases, gw + gb):
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)


def _random_gradient(rng):
  shapes = [(int(c), int(d)) for c, d in zip(rng.integers(1, 40, 3),
                                             rng.integers(1, 6, 3))]
  embedding = []
  for c, d in shapes:
    rows = np.sort(rng.choice(c, size=rng.integers(0, min(c, 4) + 1),
                              replace=False))
    embedding.append(sm.RowSparseGradient((c, d), rows,
                                          rng.standard_normal((len(rows), d))))
  scale = 10.0 ** rng.uniform(-3, 3)
  return sm.PerExampleGradient(
      embedding, [rng.standard_normal((4, 3)) * scale],
      [rng.standard_normal(3) * scale])


def test_03_clipping_suite():
  with Timer(1):
    rng = np.random.default_rng(3)
    for _ in range(1000):
      g = _random_gradient(rng)
      c = 10.0 ** rng.uniform(-2, 3)
      clipped = sm.clip_gradient(g, c)
      assert clipped.norm() <= c * (1 + 1e-12)
      if g.norm() <= c:
        assert clipped is g
      again = sm.clip_gradient(clipped, c)
      for a, b in zip(again.embedding, clipped.embedding):
        np.testing.assert_allclose(a.values, b.values, rtol=1e-12)
      for a, b in zip(clipped.embedding, g.embedding):
        np.testing.assert_array_equal(a.indices, b.indices)


def test_04_accountant_soundness():
  with Timer(60):
    for sigma in (0.5, 0.8, 1.0, 2.0, 4.0):
      for eps in (0.1, 0.5, 1.0):
        got = pa.delta_for(sigma, 1.0, 1, eps)
        assert abs(got - pa.gaussian_delta(sigma, eps)) < 1e-4, (sigma, eps)
    delta = 1e-5
    for gamma in (0.001, 0.01, 0.1):
      for sigma in (0.5, 1.0, 2.0):
        for steps in (100, 1000):
          pld = pa.epsilon_for(sigma, gamma, steps, delta)
          rdp = rdp_epsilon(gamma, sigma, steps, delta)
          assert pld <= rdp, (gamma, sigma, steps, pld, rdp)
    for eps, gamma, steps in ((0.5, 0.01, 1000), (1.0, 0.02, 500),
                              (4.0, 0.1, 100)):
      sigma = pa.calibrate_sigma(eps, delta, gamma, steps)
      assert pa.epsilon_for(sigma, gamma, steps, delta) <= eps


def test_05_adafest_composition_identity():
  with Timer(5):
    for sigma, gamma, steps in ((1.0, 0.01, 200), (3.0, 0.05, 100)):
      combined = pa.adafest_budget(sigma, sigma, gamma, steps, 1e-5)
      single = pa.epsilon_for(sigma / math.sqrt(2), gamma, steps, 1e-5)
      assert combined == pytest.approx(single, abs=pa.DEFAULT_GRID_WIDTH)


def test_06_mechanism_statistics():
  with Timer(60):
    rng = np.random.default_rng(6)
    c, trials = 8, 100_000
    picks = [mech.gumbel_topk(np.full(c, 3.0), 0.5, 1, rng)[0]
             for _ in range(trials)]
    freq = np.bincount(picks, minlength=c) / trials
    assert np.all(np.abs(freq - 1 / c) <= 3 * math.sqrt(
        (1 / c) * (1 - 1 / c) / trials))

    counts, eps = np.array([4.0, 2.5]), 0.8
    g = stats.gumbel_r.rvs(size=(1_000_000, 2), random_state=7) / eps
    oracle = np.mean(np.argmax(counts + g, axis=1) == 0)
    impl = np.mean([mech.gumbel_topk(counts, eps, 1, rng)[0] == 0
                    for _ in range(100_000)])
    print(f"two-bucket selection: impl {impl:.4f} oracle {oracle:.4f}")
    assert abs(impl - oracle) < 0.01


def test_07_efficient_mask_matches_naive_bernoulli():
  with Timer(30):
    c, trials = 100_000, 10_000
    c1, sigma1 = 1.0, 1.0
    tau = stats.norm.isf(0.01) * sigma1 * c1  # zero rows survive w.p. 0.01
    vhat = mech.ContributionMap((c,), [np.array([5, 777, 40_000])],
                                [np.array([0.5, 2.0, 3.5])])
    p = mech.survival_probability(vhat.dense()[0], tau, sigma1, c1)
    rng = np.random.default_rng(7)
    fast = np.zeros(c)
    naive = np.zeros(c)
    zero = np.ones(c, dtype=bool)
    zero[vhat.indices[0]] = False
    false_positives = 0
    for _ in range(trials):
      rows = mech.sample_mask_efficient(vhat, tau, sigma1, c1, rng).rows[0]
      fast[rows] += 1
      false_positives += int(np.count_nonzero(zero[rows]))
      naive += rng.random(c) < p
    sd = np.sqrt(2 * trials * p * (1 - p))
    outside = np.abs(fast - naive) > 3 * sd
    # Two-sided 3-sigma exceedances of independent counts: ~0.27% expected.
    allowed = c * 0.0027 + 3 * math.sqrt(c * 0.0027)
    print(f"coordinates outside 3 sigma: {outside.sum()} (allowed {allowed:.0f})")
    assert outside.sum() <= allowed
    for j in vhat.indices[0]:
      assert abs(fast[j] - naive[j]) <= 3 * sd[j]
    expected = (c - 3) * 0.01
    mean_fp = false_positives / trials
    print(f"mean false positives {mean_fp:.2f}, expected {expected:.2f}")
    assert abs(mean_fp - expected) <= 0.1 * expected


def test_08_degenerate_reductions():
  with Timer(120):
    p = make_params(seed=8)
    batch = random_batch(p, np.random.default_rng(8), n=20)
    a, b = p.copy(), p.copy()
    opt.sgd_step(a, batch, 0.3)
    inf = NoiseConfig(c1=math.inf, c2=math.inf, sigma1=0, sigma2=0, tau=0)
    opt.adafest_step(b, batch, inf, 0.3, np.random.default_rng(0))
    for x, y in zip(_arrays(a), _arrays(b)):
      np.testing.assert_array_equal(x, y)

    full = opt.SelectedVocabulary.full([t.shape[0] for t in p.tables])
    trials, sigma = 1000, 0.7
    updates = {}
    for name, seed in (("dpsgd", 11), ("dpfest", 12)):
      rng = np.random.default_rng(seed)
      out = []
      for _ in range(trials):
        q = p.copy()
        if name == "dpsgd":
          opt.dpsgd_step(q, batch, 1.0, sigma, 1.0, rng)
        else:
          opt.dpfest_step(q, batch, full, 1.0, sigma, 1.0, rng)
        out.append(np.concatenate([(x - y).ravel() for x, y in
                                   zip(_arrays(p), _arrays(q))]))
      updates[name] = np.array(out)
    u, v = updates["dpsgd"], updates["dpfest"]
    mean_se = np.sqrt(u.var(0, ddof=1) / trials + v.var(0, ddof=1) / trials)
    var_se = np.sqrt(2 / (trials - 1)) * np.sqrt(u.var(0, ddof=1) ** 2 +
                                                 v.var(0, ddof=1) ** 2)
    mean_out = np.abs(u.mean(0) - v.mean(0)) > 3 * mean_se
    var_out = np.abs(u.var(0, ddof=1) - v.var(0, ddof=1)) > 3 * var_se
    n = u.shape[1]
    allowed = n * 0.0027 + 3 * math.sqrt(n * 0.0027)
    print(f"{n} coordinates; outside 3 SE: mean {mean_out.sum()}, "
          f"variance {var_out.sum()} (allowed {allowed:.1f})")
    assert mean_out.sum() <= allowed and var_out.sum() <= allowed


FRONTIER_GRID = """
algo=dpsgd,adafest
lr=5,8
sigma_ratio=1,1.5
tau=10
seed=0,1,2
"""

FRONTIER_PLUS_GRID = """
algo=adafest_plus
lr=8
sigma_ratio=1,1.5
tau=5,10
k=500
freq_source=dp_topk
dpfest_epsilon=0.1
seed=0,1,2
"""


def test_09_desk_scale_frontier():
  with Timer(15 * 60):
    dataset = data.generate(data.DatasetSpec())
    records = ex.sweep(ex.parse_grid(FRONTIER_GRID), dataset)
    records += ex.sweep(ex.parse_grid(FRONTIER_PLUS_GRID), dataset)
  assert all(r.epsilon == 1.0 and r.delta == pytest.approx(1 / 40_000)
             for r in records)
  fronts = {}
  for algo in ("adafest", "adafest_plus"):
    subset = [r for r in records if r.algorithm in ("dpsgd", algo)]
    fronts[algo] = {row["utility_loss"]: row for row in ex.frontier(subset)}
  print("loss    adafest  adafest_plus (embedding reduction)")
  for loss in ex.DEFAULT_LOSS_THRESHOLDS:
    print(f"{loss:<7} {fronts['adafest'][loss]['best_embedding_reduction_factor']:8.1f}"
          f" {fronts['adafest_plus'][loss]['best_embedding_reduction_factor']:8.1f}")
  assert fronts["adafest"][0.01]["best_embedding_reduction_factor"] >= 50
  for loss in ex.DEFAULT_LOSS_THRESHOLDS:
    assert (fronts["adafest_plus"][loss]["best_embedding_reduction_factor"] >=
            fronts["adafest"][loss]["best_embedding_reduction_factor"]), loss


def test_10_streaming_frequency_ordering():
  with Timer(10 * 60):
    dataset = data.generate(data.DatasetSpec(period_count=5, drift_period=1))
    config = OptimizerConfig(algorithm="dpfest", lr=5.0, batch_size=1024,
                             steps=500, dpfest_k=1000,
                             dpfest_epsilon=math.inf)
    accuracy = {}
    for source in ("first", "streaming", "all"):
      runs = [ex.run_streaming(dataset, ex.StreamingConfig(5, 1, source),
                               config, seed=s)[-1].accuracy for s in range(8)]
      accuracy[source] = float(np.mean(runs))
  print("final accuracy by frequency source:", accuracy)
  assert accuracy["streaming"] >= accuracy["first"]
  assert abs(accuracy["all"] - accuracy["streaming"]) <= 0.005


def test_11_update_wallclock_trend():
  with Timer(10 * 60):
    results = benchmark.benchmark_updates([100_000, 1_000_000, 5_000_000],
                                          dim=64, batch=1024, trials=10)
  factors = [r.reduction_factor for r in results]
  print("reduction factors:", [round(f, 1) for f in factors])
  assert all(a < b for a, b in zip(factors, factors[1:]))
  assert factors[1] >= 5
