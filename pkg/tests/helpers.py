"""Shared builders and independent reference implementations for tests."""

import math

import numpy as np
from scipy import special

from sparsedp import sparse_model as sm


def make_params(vocab=(7, 5, 11), dims=(3, 2, 4), n_numeric=2, hidden=(6, 5),
                pooling=("sum", "mean", "sum"), seed=0):
  features = [sm.FeatureSpec(i, c, d, p)
              for i, (c, d, p) in enumerate(zip(vocab, dims, pooling))]
  return sm.init_params(features, n_numeric, hidden,
                        rng=np.random.default_rng(seed))


def random_example(params, rng, max_buckets=3):
  buckets = []
  for spec in params.features:
    m = rng.integers(1, min(max_buckets, spec.vocab_size) + 1)
    buckets.append(rng.choice(spec.vocab_size, size=m, replace=False))
  return sm.Example.create(int(rng.integers(0, 2)),
                           rng.exponential(3.0, size=params.n_numeric),
                           buckets)


def random_batch(params, rng, n=16, max_buckets=3):
  return sm.Batch.from_examples(
      [random_example(params, rng, max_buckets) for _ in range(n)])


def flat_views(params):
  """Every parameter array of the model, in a fixed order."""
  return [*params.tables, *params.weights, *params.biases]


def flat_gradient(params, grad):
  dense = [g.to_dense() for g in grad.embedding]
  return [*dense, *grad.weights, *grad.biases]


def min_relu_margin(params, example):
  _, cache = sm.forward(params, example)
  return min(float(np.min(np.abs(z))) for z in cache["pre"][:-1])


def finite_difference(params, example, h=1e-6):
  """Central differences of the loss w.r.t. every parameter."""
  out = []
  for arr in flat_views(params):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
      idx = it.multi_index
      old = arr[idx]
      arr[idx] = old + h
      up = sm.loss(params, example)
      arr[idx] = old - h
      down = sm.loss(params, example)
      arr[idx] = old
      g[idx] = (up - down) / (2 * h)
    out.append(g)
  return out


def relative_errors(analytic, numeric, floor=1e-9):
  """Elementwise ``|a - n| / max(|a|, |n|)``; pairs both below ``floor`` count as 0."""
  errs = []
  for a, n in zip(analytic, numeric):
    scale = np.maximum(np.abs(a), np.abs(n))
    err = np.where(scale < floor, 0.0,
                   np.abs(a - n) / np.where(scale < floor, 1.0, scale))
    errs.append(err)
  return errs


def onehot_forward_backward(params, example):
  """Dense reference: pooling as a one-hot matrix product, head by hand."""
  pooled, onehots = [], []
  for spec, table, b in zip(params.features, params.tables, example.buckets):
    x = np.zeros(spec.vocab_size)
    x[b] = 1.0
    if spec.pooling == "mean":
      x /= len(b)
    onehots.append(x)
    pooled.append(x @ table)
  a = np.concatenate([*pooled, example.numeric])
  acts, pres = [a], []
  for l, (w, bias) in enumerate(zip(params.weights, params.biases)):
    z = acts[-1] @ w + bias
    pres.append(z)
    acts.append(np.maximum(z, 0) if l < len(params.weights) - 1 else z)
  logit = acts[-1][0]
  p = 1 / (1 + math.exp(-logit))
  delta = np.array([p - example.label])
  gw, gb = [None] * len(params.weights), [None] * len(params.weights)
  for l in range(len(params.weights) - 1, -1, -1):
    gw[l] = np.outer(acts[l], delta)
    gb[l] = delta.copy()
    delta = params.weights[l] @ delta
    if l > 0:
      delta = delta * (pres[l - 1] > 0)
  tables, offset = [], 0
  for spec, x in zip(params.features, onehots):
    dz = delta[offset:offset + spec.embedding_dim]
    offset += spec.embedding_dim
    tables.append(np.outer(x, dz))
  return logit, tables, gw, gb


def rdp_epsilon(gamma, sigma, steps, delta, orders=range(2, 257)):
  """Epsilon from Renyi DP of the Poisson-subsampled Gaussian.

  Integer orders use the exact binomial expansion of
  ``E_Q[(P/Q)^alpha]`` for ``P = (1-g) N(0, s^2) + g N(1, s^2)``; conversion
  via ``eps = T * rdp(alpha) + log(1/delta) / (alpha - 1)``.
  """
  best = math.inf
  for a in orders:
    k = np.arange(a + 1)
    log_terms = (special.gammaln(a + 1) - special.gammaln(k + 1) -
                 special.gammaln(a - k + 1))
    with np.errstate(divide="ignore"):
      log_terms = log_terms + (a - k) * np.log1p(-gamma) + k * np.log(gamma)
    log_terms = log_terms + (k * k - k) / (2 * sigma**2)
    rdp = special.logsumexp(log_terms) / (a - 1)
    best = min(best, steps * rdp + math.log(1 / delta) / (a - 1))
  return best
