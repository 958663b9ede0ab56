"""Rényi-DP accounting for the Poisson-subsampled Gaussian mechanism."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln, logsumexp

DEFAULT_ORDERS = tuple([1.25, 1.5, 1.75, 2.0, 2.5] + [float(a) for a in range(3, 257)])


class AccountantError(ValueError):
    pass


class InvalidRate(AccountantError):
    pass


class EmptyOrderGrid(AccountantError):
    pass


def _check(q: float, sigma: float):
    if not 0.0 < q <= 1.0:
        raise InvalidRate(f"sample rate must lie in (0, 1], got {q}")
    if sigma <= 0:
        raise AccountantError(f"noise multiplier must be positive, got {sigma}")


def rdp_gaussian(sigma: float, alpha: float) -> float:
    """Rényi divergence of order alpha between N(0, s^2) and N(1, s^2)."""
    if sigma <= 0 or alpha <= 1:
        raise AccountantError("need sigma > 0 and alpha > 1")
    return alpha / (2.0 * sigma ** 2)


def _log_moment_int(q: float, sigma: float, alpha: int) -> float:
    """log E[(p/q)^alpha] for integer alpha via the binomial expansion."""
    if q == 1.0:
        return alpha * (alpha - 1) / (2.0 * sigma ** 2)
    k = np.arange(alpha + 1, dtype=float)
    log_binom = gammaln(alpha + 1) - gammaln(k + 1) - gammaln(alpha - k + 1)
    terms = log_binom + (alpha - k) * math.log1p(-q) + k * math.log(q) + (k * k - k) / (2.0 * sigma ** 2)
    return float(logsumexp(terms))


def rdp_subsampled_gaussian(q: float, sigma: float, alpha: float) -> float:
    """Per-step RDP bound of the Poisson-subsampled Gaussian.

    Integer orders use the binomial expansion.  Fractional orders linearly
    interpolate the log-moment ``(alpha - 1) * rho`` between the bracketing
    integers; the log-moment is convex in alpha, so this stays an upper bound.
    """
    _check(q, sigma)
    if alpha <= 1:
        raise AccountantError("orders must exceed 1")
    if q == 1.0:
        return rdp_gaussian(sigma, alpha)
    if float(alpha).is_integer():
        a = int(alpha)
        return _log_moment_int(q, sigma, a) / (a - 1)
    lo, hi = math.floor(alpha), math.ceil(alpha)
    m_lo = 0.0 if lo == 1 else _log_moment_int(q, sigma, lo)
    m_hi = _log_moment_int(q, sigma, hi)
    t = alpha - lo
    return ((1 - t) * m_lo + t * m_hi) / (alpha - 1)


def _log_moments(q: float, sigma: float, max_order: int) -> np.ndarray:
    """Integer-order log-moments for orders 0..max_order in one vectorized pass."""
    a = np.arange(max_order + 1, dtype=float)[:, None]
    k = np.arange(max_order + 1, dtype=float)[None, :]
    if q == 1.0:
        return (a * (a - 1) / (2.0 * sigma ** 2))[:, 0]
    with np.errstate(invalid="ignore"):
        log_binom = gammaln(a + 1) - gammaln(k + 1) - gammaln(np.maximum(a - k, 0) + 1)
        terms = log_binom + (a - k) * math.log1p(-q) + k * math.log(q) + (k * k - k) / (2.0 * sigma ** 2)
    terms = np.where(k <= a, terms, -np.inf)
    return logsumexp(terms, axis=1)


def rdp_curve(q: float, sigma: float, orders=DEFAULT_ORDERS) -> np.ndarray:
    """``rdp_subsampled_gaussian`` evaluated on a whole order grid."""
    _check(q, sigma)
    orders = np.asarray(orders, dtype=float)
    if np.any(orders <= 1):
        raise AccountantError("orders must exceed 1")
    if q == 1.0:
        return orders / (2.0 * sigma ** 2)
    moments = _log_moments(q, sigma, int(math.ceil(orders.max())))
    moments[1] = 0.0
    lo = np.floor(orders).astype(int)
    hi = np.ceil(orders).astype(int)
    t = orders - lo
    return ((1 - t) * moments[lo] + t * moments[hi]) / (orders - 1)


@dataclass(frozen=True)
class AccountantState:
    q: float
    sigma: float
    orders: tuple = DEFAULT_ORDERS
    rho: tuple = field(default=None)
    steps: int = 0

    def __post_init__(self):
        if len(self.orders) == 0:
            raise EmptyOrderGrid("the order grid is empty")
        if self.rho is None:
            object.__setattr__(self, "rho", tuple(0.0 for _ in self.orders))
        if len(self.rho) != len(self.orders):
            raise AccountantError("rho and orders differ in length")

    def step_curve(self) -> np.ndarray:
        if self.sigma == 0:
            return np.full(len(self.orders), np.inf)
        return rdp_curve(self.q, self.sigma, self.orders)


def account_steps(state: AccountantState, steps: int) -> AccountantState:
    """Compose ``steps`` more mechanism invocations (RDP adds per order)."""
    if steps < 0:
        raise AccountantError("step count must be non-negative")
    if steps == 0:
        return state
    rho = np.asarray(state.rho) + steps * state.step_curve()
    return replace(state, rho=tuple(float(r) for r in rho), steps=state.steps + steps)


def epsilon_curve(orders, rho, delta: float, conversion: str = "improved") -> np.ndarray:
    a = np.asarray(orders, dtype=float)
    r = np.asarray(rho, dtype=float)
    if conversion == "classic":
        return r + math.log(1.0 / delta) / (a - 1)
    if conversion == "improved":
        return r + np.log((a - 1) / a) - (math.log(delta) + np.log(a)) / (a - 1)
    raise AccountantError(f"unknown conversion {conversion!r}")


def to_epsilon(state: AccountantState, delta: float, conversion: str = "improved") -> tuple[float, float]:
    """Smallest epsilon over the order grid and the order achieving it.

    ``conversion='classic'`` uses ``rho + log(1/delta)/(alpha - 1)``;
    the default ``'improved'`` variant subtracts the extra
    ``log(alpha)/(alpha-1) - log((alpha-1)/alpha)`` slack and is never larger.
    """
    if not 0 < delta < 1:
        raise AccountantError("delta must lie in (0, 1)")
    if len(state.orders) == 0:
        raise EmptyOrderGrid("the order grid is empty")
    eps = epsilon_curve(state.orders, state.rho, delta, conversion)
    i = int(np.argmin(eps))
    return max(0.0, float(eps[i])), float(state.orders[i])


def epsilon_for(q: float, sigma: float, steps: int, delta: float, orders=DEFAULT_ORDERS,
                conversion: str = "improved") -> tuple[float, float]:
    state = account_steps(AccountantState(q, sigma, tuple(orders)), steps)
    return to_epsilon(state, delta, conversion)


def calibrate_sigma(target_epsilon: float, delta: float, q: float, steps: int, *, tol: float = 1e-3,
                    orders=DEFAULT_ORDERS, conversion: str = "improved", sigma_max: float = 1e4) -> float:
    """Bisect the noise multiplier so that epsilon lands within ``tol`` below the target."""
    if target_epsilon <= 0:
        raise AccountantError("target epsilon must be positive")
    _check(q, 1.0)

    def eps(s):
        return epsilon_for(q, s, steps, delta, orders, conversion)[0]

    lo, hi = 1e-3, 1.0
    while eps(hi) > target_epsilon:
        lo, hi = hi, hi * 2
        if hi > sigma_max:
            raise AccountantError("target epsilon unreachable within the noise range")
    if eps(lo) <= target_epsilon:
        return lo
    for _ in range(200):
        e_hi = eps(hi)
        if target_epsilon - e_hi < tol:
            break
        mid = 0.5 * (lo + hi)
        if eps(mid) > target_epsilon:
            lo = mid
        else:
            hi = mid
    return hi


def order_table(state: AccountantState, delta: float, conversion: str = "improved") -> list[tuple[float, float, float]]:
    eps = epsilon_curve(state.orders, state.rho, delta, conversion)
    return [(float(a), float(r), float(e)) for a, r, e in zip(state.orders, state.rho, eps)]
