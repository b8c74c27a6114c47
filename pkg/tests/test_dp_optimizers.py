import math

import numpy as np
import pytest

from helpers import make_params, random_batch
from sparsedp import dp_mechanisms, dp_optimizers as opt
from sparsedp.dp_mechanisms import NoiseConfig
from sparsedp.sparse_model import batch_gradients


def _arrays(params):
  return [*params.tables, *params.weights, *params.biases]


def test_config_validation():
  with pytest.raises(ValueError):
    opt.OptimizerConfig(algorithm="adam")
  with pytest.raises(ValueError):
    opt.OptimizerConfig(frequency_source="yesterday")
  with pytest.raises(ValueError):
    opt.OptimizerConfig(lr=0.0)
  with pytest.raises(ValueError):
    opt.OptimizerConfig(sampling="stratified")


def test_degenerate_adafest_is_sgd(params, rng):
  batch = random_batch(params, rng, n=20)
  a, b = params.copy(), params.copy()
  opt.sgd_step(a, batch, 0.3)
  noise = NoiseConfig(c1=math.inf, c2=math.inf, sigma1=0, sigma2=0, tau=0)
  opt.adafest_step(b, batch, noise, 0.3, np.random.default_rng(0))
  for x, y in zip(_arrays(a), _arrays(b)):
    np.testing.assert_array_equal(x, y)


def test_sgd_step_is_mean_gradient_descent(params, rng):
  batch = random_batch(params, rng, n=8)
  before = params.copy()
  opt.sgd_step(params, batch, 0.5)
  bg = batch_gradients(before, batch)
  keep = [bg.active_entries(f) for f in range(3)]
  total = bg.weighted_sum(np.full(8, 1 / 8), keep)
  for t0, t1, g in zip(before.tables, params.tables, total.embedding):
    np.testing.assert_allclose(t1, t0 - 0.5 * g.to_dense(), atol=1e-12)


def test_dpsgd_without_noise_clips(params, rng):
  batch = random_batch(params, rng, n=10)
  before = params.copy()
  c2 = 1e-3
  opt.dpsgd_step(params, batch, c2, 0.0, 1.0, np.random.default_rng(0))
  delta = np.concatenate([(x - y).ravel() for x, y in
                          zip(_arrays(before), _arrays(params))])
  assert np.linalg.norm(delta) <= c2 * (1 + 1e-9)


def test_dpsgd_noises_every_coordinate(params, rng):
  batch = random_batch(params, rng, n=4)
  _, report = opt.dpsgd_step(params, batch, 1.0, 1.0, 1.0,
                             np.random.default_rng(0))
  assert report.noised_coordinate_count == params.num_params


def _count_noise(monkeypatch):
  counter = {"n": 0}
  original = dp_mechanisms.gradient_noise

  def counting(rng, shape, std):
    out = original(rng, shape, std)
    if std > 0:
      counter["n"] += int(np.prod(shape))
    return out

  monkeypatch.setattr(dp_mechanisms, "gradient_noise", counting)
  return counter


@pytest.mark.parametrize("algo", ["dpsgd", "dpfest", "adafest",
                                  "adafest_plus"])
def test_reported_count_equals_noise_drawn(monkeypatch, params, rng, algo):
  counter = _count_noise(monkeypatch)
  batch = random_batch(params, rng, n=12)
  selected = opt.SelectedVocabulary(tuple(np.arange(0, t.shape[0], 2)
                                          for t in params.tables))
  noise = NoiseConfig(c1=1.0, c2=1.0, sigma1=0.5, sigma2=1.0, tau=1.0)
  r = np.random.default_rng(0)
  if algo == "dpsgd":
    _, report = opt.dpsgd_step(params, batch, 1.0, 1.0, 0.1, r)
  elif algo == "dpfest":
    _, report = opt.dpfest_step(params, batch, selected, 1.0, 1.0, 0.1, r)
  elif algo == "adafest":
    _, report = opt.adafest_step(params, batch, noise, 0.1, r)
  else:
    _, report = opt.adafest_plus_step(params, batch, selected, noise, 0.1, r)
  assert counter["n"] == report.noised_coordinate_count
  assert report.head_coordinates == params.head_size


def test_adafest_masked_rows_are_untouched(params, rng):
  batch = random_batch(params, rng, n=30)
  before = params.copy()
  noise = NoiseConfig(c1=1.0, c2=1.0, sigma1=0.0, sigma2=0.5, tau=3.0)
  _, report = opt.adafest_step(params, batch, noise, 0.5,
                               np.random.default_rng(0))
  for f, (t0, t1) in enumerate(zip(before.tables, params.tables)):
    changed = np.flatnonzero(np.any(t0 != t1, axis=1))
    assert len(changed) == report.surviving_rows[f]
    # Noiseless map: survivors are the buckets with enough clipped mass.
    acts = [[batch.example(i).buckets[g] for g in range(3)]
            for i in range(len(batch))]
    vhat = dp_mechanisms.contribution_map(acts, [t.shape[0] for t in
                                                 params.tables], 1.0).dense()
    np.testing.assert_array_equal(changed, np.flatnonzero(vhat[f] >= 3.0))


def test_high_threshold_leaves_only_head(params, rng):
  batch = random_batch(params, rng, n=8)
  before = params.copy()
  noise = NoiseConfig(c1=1.0, c2=1.0, sigma1=0.0, sigma2=1.0, tau=9.0)
  _, report = opt.adafest_step(params, batch, noise, 0.5,
                               np.random.default_rng(0))
  assert report.embedding_coordinates == 0
  assert report.noised_coordinate_count == params.head_size
  for t0, t1 in zip(before.tables, params.tables):
    np.testing.assert_array_equal(t0, t1)


def test_dense_and_geometric_mask_samplers_agree_in_distribution():
  p = make_params(vocab=(40, 30, 20))
  batch = random_batch(p, np.random.default_rng(0), n=25)
  noise = NoiseConfig(c1=1.0, c2=1.0, sigma1=1.0, sigma2=0.0, tau=1.5)
  counts = {}
  for sampler in ("geometric", "dense"):
    rng = np.random.default_rng(1)
    tot = np.zeros(3)
    for _ in range(600):
      _, r = opt.adafest_step(p.copy(), batch, noise, 0.1, rng,
                              mask_sampler=sampler)
      tot += r.surviving_rows
    counts[sampler] = tot / 600
  np.testing.assert_allclose(counts["geometric"], counts["dense"], rtol=0.1)


def test_dpfest_full_vocabulary_matches_dpsgd_moments():
  p = make_params(vocab=(4, 3, 5), dims=(2, 2, 2), hidden=(3,))
  batch = random_batch(p, np.random.default_rng(0), n=6)
  full = opt.SelectedVocabulary.full([t.shape[0] for t in p.tables])
  trials, sigma = 400, 0.8
  updates = {"dpsgd": [], "dpfest": []}
  for algo in updates:
    rng = np.random.default_rng(5 if algo == "dpsgd" else 6)
    for _ in range(trials):
      q = p.copy()
      if algo == "dpsgd":
        opt.dpsgd_step(q, batch, 1.0, sigma, 1.0, rng)
      else:
        opt.dpfest_step(q, batch, full, 1.0, sigma, 1.0, rng)
      updates[algo].append(np.concatenate(
          [(a - b).ravel() for a, b in zip(_arrays(p), _arrays(q))]))
  a, b = np.array(updates["dpsgd"]), np.array(updates["dpfest"])
  se = np.sqrt(a.var(0) / trials + b.var(0) / trials)
  assert np.mean(np.abs(a.mean(0) - b.mean(0)) < 3 * se) > 0.95


def test_dpfest_zeroes_unselected_rows(params, rng):
  batch = random_batch(params, rng, n=10)
  before = params.copy()
  selected = opt.SelectedVocabulary((np.array([0, 1]), np.array([2]),
                                     np.array([], dtype=np.int64)))
  opt.dpfest_step(params, batch, selected, 1.0, 0.7, 0.5,
                  np.random.default_rng(0))
  for t0, t1, s in zip(before.tables, params.tables, selected.rows):
    changed = np.flatnonzero(np.any(t0 != t1, axis=1))
    np.testing.assert_array_equal(changed, s)


def test_bucket_frequencies_and_selection(params, rng):
  batch = random_batch(params, rng, n=40)
  freqs = opt.bucket_frequencies(batch, [t.shape[0] for t in params.tables])
  for f, h in enumerate(freqs):
    assert h.sum() == len(batch.indices[f])
  sel = opt.dpfest_select(freqs, 6)
  for h, s in zip(freqs, sel.rows):
    assert len(s) == 2
    assert h[s].min() >= np.sort(h)[-2]
  with pytest.raises(ValueError):
    opt.dpfest_select(freqs, 0)


def test_poisson_denominator(params, rng):
  batch = random_batch(params, rng, n=5)
  a, b = params.copy(), params.copy()
  opt.sgd_step(a, batch, 1.0)
  opt.sgd_step(b, batch, 0.5, denominator=2.5)
  for x, y in zip(_arrays(a), _arrays(b)):
    np.testing.assert_allclose(x, y, atol=1e-12)
