"""Privacy-loss-distribution accounting for the Poisson-subsampled Gaussian.

One step of every optimizer in this package is dominated by the pair

    P = (1 - gamma) N(0, sigma^2) + gamma N(1, sigma^2),   Q = N(0, sigma^2)

and ``T`` steps by ``(P^T, Q^T)``. The privacy loss ``ln(dP/dQ)`` is
discretized on a grid of width ``grid_width`` with every mass rounded *up*
to the next grid point, so all derived deltas and epsilons are upper bounds.
Both directions (``remove``: loss of P against Q under P; ``add``: loss of Q
against P under Q) are tracked and the worse one is reported.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy import signal, special, stats

DEFAULT_GRID_WIDTH = 1e-4
TAIL_MASS = 1e-12
EPS_SEARCH = (1e-4, 1e3)
EPS_ITERATIONS = 60
SIGMA_SEARCH = (0.05, 500.0)
# Single-step losses beyond +-LOSS_CAP, and composed losses beyond
# +-COMPOSED_LOSS_CAP, are folded pessimistically (see ``_cap``). The composed
# cap equals the top of the epsilon search range, so no reachable epsilon is
# affected beyond a pessimistic bias.
LOSS_CAP = 64.0
COMPOSED_LOSS_CAP = EPS_SEARCH[1]


class PrecisionError(ArithmeticError):
  """The discretization cannot represent the distribution accurately."""


class RangeError(ValueError):
  """No noise multiplier in the search range meets the target."""


@dataclasses.dataclass(frozen=True)
class PrivacyLossDistribution:
  """Discrete privacy loss distribution on the grid ``grid_width * Z``.

  ``probs[i]`` is the mass at loss ``(offset + i) * grid_width``.
  ``infinity_mass`` is the mass at loss ``+inf`` (truncated upper tail),
  which is added to every delta.
  """
  grid_width: float
  offset: int
  probs: np.ndarray
  infinity_mass: float
  direction: str

  @property
  def losses(self) -> np.ndarray:
    return (self.offset + np.arange(len(self.probs))) * self.grid_width

  def delta(self, epsilon: float) -> float:
    """Hockey-stick divergence ``sum p (1 - e^(eps - loss))_+ + inf mass``."""
    losses = self.losses
    above = losses > epsilon
    val = np.sum(self.probs[above] * -np.expm1(epsilon - losses[above]))
    return float(min(1.0, val + self.infinity_mass))

  def epsilon(self, delta: float) -> float:
    """Smallest epsilon >= 0 (up to bisection accuracy) with delta(eps) <= delta."""
    if self.infinity_mass > delta:
      return math.inf
    if self.delta(0.0) <= delta:
      return 0.0
    lo, hi = EPS_SEARCH
    if self.delta(lo) <= delta:
      return lo
    if self.delta(hi) > delta:
      return math.inf
    for _ in range(EPS_ITERATIONS):
      mid = 0.5 * (lo + hi)
      if self.delta(mid) <= delta:
        hi = mid
      else:
        lo = mid
    return hi

  def compose(self, other: "PrivacyLossDistribution",
              tail_mass: float = TAIL_MASS) -> "PrivacyLossDistribution":
    if not math.isclose(self.grid_width, other.grid_width):
      raise PrecisionError("grid widths differ")
    probs = signal.fftconvolve(self.probs, other.probs)
    probs = np.maximum(probs, 0.0)
    offset = self.offset + other.offset
    inf_mass = 1.0 - (1.0 - self.infinity_mass) * (1.0 - other.infinity_mass)
    probs, offset, inf_mass = _cap(probs, offset, inf_mass, self.grid_width,
                                   COMPOSED_LOSS_CAP)
    probs, offset, inf_mass = _truncate(probs, offset, inf_mass, tail_mass)
    return PrivacyLossDistribution(self.grid_width, offset, probs, inf_mass,
                                   self.direction)

  def self_compose(self, count: int,
                   tail_mass: float = TAIL_MASS) -> "PrivacyLossDistribution":
    """``count``-fold composition by repeated squaring."""
    if count < 1:
      raise ValueError("count must be positive")
    result, base = None, self
    while True:
      if count & 1:
        result = base if result is None else result.compose(base, tail_mass)
      count >>= 1
      if not count:
        return result
      base = base.compose(base, tail_mass)


def _cap(probs, offset, inf_mass, grid_width, limit):
  """Moves mass above ``limit`` to infinity and below ``-limit`` up."""
  cap = int(math.ceil(limit / grid_width))
  lo = max(0, -cap - offset)
  hi = min(len(probs), cap - offset + 1)
  if lo == 0 and hi == len(probs):
    return probs, offset, inf_mass
  if hi <= lo:
    # Everything on one side of the window.
    if offset > 0:
      return np.zeros(1), cap, inf_mass + probs.sum()
    return np.array([probs.sum()]), -cap, inf_mass
  kept = probs[lo:hi].copy()
  kept[0] += probs[:lo].sum()
  return kept, offset + lo, inf_mass + probs[hi:].sum()


def _truncate(probs, offset, inf_mass, tail_mass):
  """Drops up to ``tail_mass`` from each end, pessimistically.

  Lower-tail mass is moved up onto the new first grid point; upper-tail mass
  goes to the infinity atom.
  """
  cdf = np.cumsum(probs)
  lo = int(np.searchsorted(cdf, tail_mass, side="right"))
  lo = max(0, min(lo, len(probs) - 1))
  rcdf = np.cumsum(probs[::-1])
  hi = len(probs) - int(np.searchsorted(rcdf, tail_mass, side="right"))
  hi = max(hi, lo + 1)
  dropped_low = probs[:lo].sum()
  upper = probs[hi:].sum()
  kept = probs[lo:hi].copy()
  kept[0] += dropped_low
  return kept, offset + lo, inf_mass + upper


def _mixture_cdf(x, gamma, sigma):
  return (1 - gamma) * special.ndtr(x / sigma) + gamma * special.ndtr(
      (x - 1) / sigma)


def _mixture_sf(x, gamma, sigma):
  return (1 - gamma) * special.ndtr(-x / sigma) + gamma * special.ndtr(
      (1 - x) / sigma)


def _loss_to_x(loss, gamma, sigma):
  """Inverse of ``x -> ln(1 - gamma + gamma exp((2x - 1) / (2 sigma^2)))``.

  Loss values at or below ``ln(1 - gamma)`` map to ``-inf``.
  """
  loss = np.asarray(loss, dtype=np.float64)
  with np.errstate(divide="ignore", invalid="ignore"):
    inner = (np.exp(loss) - (1 - gamma)) / gamma
    x = sigma**2 * np.log(inner) + 0.5
  return np.where(inner > 0, x, -np.inf)


def build_pld(gamma: float,
              sigma: float,
              grid_width: float = DEFAULT_GRID_WIDTH,
              direction: str = "remove",
              tail_mass: float = TAIL_MASS) -> PrivacyLossDistribution:
  """PLD of one step of the Poisson-subsampled Gaussian mechanism.

  Args:
    gamma: sampling probability in (0, 1].
    sigma: noise multiplier (noise std over sensitivity), positive.
    grid_width: loss discretization interval.
    direction: ``remove`` for ln(dP/dQ) under P, ``add`` for ln(dQ/dP)
      under Q.
    tail_mass: upper bound on the mass truncated from each tail.
  """
  if not 0 < gamma <= 1:
    raise ValueError("gamma must lie in (0, 1]")
  if not sigma > 0:
    raise ValueError("sigma must be positive")
  if direction not in ("remove", "add"):
    raise ValueError(f"unknown direction {direction!r}")

  # x-range holding all but tail_mass of both Gaussian components.
  z = -special.ndtri(tail_mass / 2)
  x_lo, x_hi = -z * sigma, 1 + z * sigma

  def loss_of_x(x):
    return np.log1p(gamma * np.expm1((2 * x - 1) / (2 * sigma**2)))

  if direction == "remove":
    # loss increasing in x; x ~ P.
    l_lo, l_hi = loss_of_x(x_lo), loss_of_x(x_hi)
    cdf = lambda l: _mixture_cdf(_loss_to_x(l, gamma, sigma), gamma, sigma)
  else:
    # loss = -loss_of_x(x), decreasing in x; x ~ Q.
    l_lo, l_hi = -loss_of_x(x_hi), -loss_of_x(x_lo)
    # Pr[-loss_of_x(X) <= l] = Pr[X >= loss_of_x^{-1}(-l)]
    cdf = lambda l: special.ndtr(-_loss_to_x(-l, gamma, sigma) / sigma)

  i_lo = max(math.floor(l_lo / grid_width),
             -math.ceil(LOSS_CAP / grid_width))
  i_hi = min(math.ceil(l_hi / grid_width), math.ceil(LOSS_CAP / grid_width))
  if i_hi - i_lo > 5e7:
    raise PrecisionError("loss range too wide for the grid")
  grid = np.arange(i_lo, i_hi + 1) * grid_width
  cdf_vals = cdf(grid)
  # Mass on ((i-1)h, ih] is placed at ih; everything <= i_lo*h at i_lo*h.
  probs = np.diff(cdf_vals, prepend=0.0)
  probs = np.maximum(probs, 0.0)
  inf_mass = max(0.0, 1.0 - cdf_vals[-1])
  probs, offset, inf_mass = _truncate(probs, i_lo, inf_mass, tail_mass)
  return PrivacyLossDistribution(grid_width, offset, probs, inf_mass,
                                 direction)


def compose_pld(pld: PrivacyLossDistribution,
                steps: int) -> PrivacyLossDistribution:
  return pld.self_compose(steps)


def delta_for(sigma: float, gamma: float, steps: int, epsilon: float,
              grid_width: float = DEFAULT_GRID_WIDTH) -> float:
  """``max`` over both directions of the composed hockey-stick divergence."""
  return max(
      compose_pld(build_pld(gamma, sigma, grid_width, d), steps).delta(epsilon)
      for d in ("remove", "add"))


def epsilon_for(sigma: float, gamma: float, steps: int, delta: float,
                grid_width: float = DEFAULT_GRID_WIDTH) -> float:
  """Upper bound on the epsilon of ``steps`` subsampled Gaussian steps."""
  if math.isinf(sigma):
    return 0.0
  return max(
      compose_pld(build_pld(gamma, sigma, grid_width, d), steps).epsilon(delta)
      for d in ("remove", "add"))


def calibrate_sigma(epsilon: float, delta: float, gamma: float, steps: int,
                    grid_width: float = DEFAULT_GRID_WIDTH,
                    rtol: float = 1e-3) -> float:
  """Smallest noise multiplier (to ``rtol``) achieving ``(epsilon, delta)``.

  Geometric bisection on ``SIGMA_SEARCH``; the returned value always meets
  the target.
  """
  if not epsilon > 0 or not 0 < delta < 1:
    raise ValueError("need epsilon > 0 and 0 < delta < 1")
  if math.isinf(epsilon):
    return 0.0
  ok = lambda s: epsilon_for(s, gamma, steps, delta, grid_width) <= epsilon
  lo, hi = SIGMA_SEARCH
  if not ok(hi):
    raise RangeError(f"epsilon={epsilon} unreachable with sigma <= {hi}")
  if ok(lo):
    return lo
  while hi / lo > 1 + rtol:
    mid = math.sqrt(lo * hi)
    if ok(mid):
      hi = mid
    else:
      lo = mid
  return hi


def compose_gaussian_sigmas(sigma1: float, sigma2: float) -> float:
  """Noise multiplier of one Gaussian equivalent to two composed ones.

  ``(sigma1^-2 + sigma2^-2)^(-1/2)``; an infinite argument drops out.
  """
  if sigma1 < 0 or sigma2 < 0 or (sigma1 == 0 and sigma2 == 0):
    raise ValueError("need nonnegative sigmas, not both zero")
  if sigma1 == 0 or sigma2 == 0:
    return 0.0
  return (sigma1**-2 + sigma2**-2) ** -0.5


def split_sigma(sigma: float, ratio: float) -> tuple[float, float]:
  """``(sigma1, sigma2)`` with ``sigma1 / sigma2 = ratio`` composing to ``sigma``."""
  if math.isinf(ratio):
    return math.inf, sigma
  sigma2 = sigma * math.sqrt(1 + ratio**-2)
  return ratio * sigma2, sigma2


def adafest_budget(sigma1: float, sigma2: float, gamma: float, steps: int,
                   delta: float,
                   grid_width: float = DEFAULT_GRID_WIDTH) -> float:
  return epsilon_for(compose_gaussian_sigmas(sigma1, sigma2), gamma, steps,
                     delta, grid_width)


@dataclasses.dataclass(frozen=True)
class BudgetSpec:
  epsilon: float
  delta: float
  selection_epsilon: float = 0.0

  def __post_init__(self):
    if not self.epsilon > 0 or not 0 < self.delta < 1:
      raise ValueError("need epsilon > 0 and 0 < delta < 1")
    if not 0 <= self.selection_epsilon < self.epsilon:
      raise ValueError("selection epsilon must be in [0, epsilon)")

  @property
  def training_epsilon(self) -> float:
    return self.epsilon - self.selection_epsilon


def dpfest_budget(train_epsilon: float, train_delta: float,
                  selection_epsilon: float) -> tuple[float, float]:
  """Basic composition with a pure-DP selection step."""
  return train_epsilon + selection_epsilon, train_delta


def gaussian_delta(sigma: float, epsilon: float) -> float:
  """Exact hockey-stick divergence of ``N(1, sigma^2)`` against ``N(0, sigma^2)``."""
  a = 1 / (2 * sigma)
  b = epsilon * sigma
  return float(stats.norm.cdf(a - b) - math.exp(epsilon) * stats.norm.cdf(-a - b))


def excess_loss_bound(lipschitz: float, bias: float, sigma: float,
                      diameter: float, steps: int) -> float:
  """Excess-loss bound of projected SGD with a biased noisy gradient oracle.

  ``sigma`` is the standard deviation of the oracle noise, so the variance
  entering the bound is ``sigma**2``.
  """
  return (diameter / math.sqrt(steps) *
          math.sqrt((lipschitz + bias)**2 + sigma**2) + bias * diameter)


def tradeoff_predicate(lipschitz: float, truncated_fraction: float,
                       support: int, dimension: int, sigma: float,
                       steps: int) -> bool:
  """Whether masked training's bound beats dense noising's bound."""
  L, g = lipschitz, truncated_fraction
  lhs = math.sqrt(L**2 * (1 + g)**2 + support * sigma**2) + g * L * math.sqrt(steps)
  rhs = math.sqrt(L**2 + dimension * sigma**2)
  return lhs < rhs
