"""Coordinate scaling, payoffs and the pointwise Dupire/arbitrage functionals.

Everything here is pure.  The pointwise functionals accept Python floats,
numpy arrays or torch tensors, so the same code serves the tests, the
Monte Carlo harness and the differentiable losses.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

import numpy as np
import torch

from .errors import (
    DegenerateDensity,
    EmptyInput,
    InvalidInput,
    NegativeInput,
    NegativeVariance,
    OutOfDomain,
)

SCALE_TOL = 1e-9
BOUND_TOL = 1e-9  # relative to spot
DUPIRE_EPS = 1e-12


class OptionKind(str, enum.Enum):
    CALL = "call"
    PUT = "put"

    @classmethod
    def parse(cls, value: "str | OptionKind") -> "OptionKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise InvalidInput(f"unknown option kind {value!r}") from None


@dataclass(frozen=True)
class MarketFrame:
    """Global market constants shared by every quote of a calibration."""

    spot: float
    rate: float
    k_max: float
    t_max: float
    kind: OptionKind = OptionKind.CALL

    def __post_init__(self):
        object.__setattr__(self, "kind", OptionKind.parse(self.kind))
        for name in ("spot", "rate", "k_max", "t_max"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise InvalidInput(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        if self.spot <= 0 or self.k_max <= 0 or self.t_max <= 0:
            raise InvalidInput("spot, k_max and t_max must be positive")
        if self.rate < 0:
            raise InvalidInput("negative rates are not supported")

    @classmethod
    def from_quotes(cls, quotes: Iterable["OptionQuote"], spot: float, rate: float,
                    kind: "str | OptionKind" = OptionKind.CALL) -> "MarketFrame":
        """Frame with ``k_max = max(K)`` and ``t_max = max(T)`` over ``quotes``."""
        quotes = list(quotes)
        if not quotes:
            raise EmptyInput("cannot derive a frame from zero quotes")
        return cls(spot=spot, rate=rate,
                   k_max=max(q.strike for q in quotes),
                   t_max=max(q.maturity for q in quotes),
                   kind=kind)

    def as_dict(self) -> dict[str, Any]:
        return {"spot": self.spot, "rate": self.rate, "k_max": self.k_max,
                "t_max": self.t_max, "kind": self.kind.value}


@dataclass(frozen=True)
class OptionQuote:
    price: float
    strike: float
    maturity: float

    def __post_init__(self):
        for name in ("price", "strike", "maturity"):
            object.__setattr__(self, name, float(getattr(self, name)))
        reason = _field_problem(self.price, self.strike, self.maturity)
        if reason:
            raise InvalidInput(reason)


@dataclass(frozen=True)
class ScaledQuote:
    price: float
    k: float
    t: float


@dataclass(frozen=True)
class SurfaceJet:
    """Value and the input derivatives of a price surface at one or more points.

    Fields may be floats, arrays or tensors of a common shape.
    """

    value: Any
    d_t: Any
    d_k: Any
    d_kk: Any

    def __add__(self, other: "SurfaceJet") -> "SurfaceJet":
        return SurfaceJet(self.value + other.value, self.d_t + other.d_t,
                          self.d_k + other.d_k, self.d_kk + other.d_kk)

    def detach(self) -> "SurfaceJet":
        return SurfaceJet(*(f.detach() if isinstance(f, torch.Tensor) else f
                            for f in (self.value, self.d_t, self.d_k, self.d_kk)))


def _field_problem(price: float, strike: float, maturity: float) -> str | None:
    if not all(math.isfinite(v) for v in (price, strike, maturity)):
        return "non-finite field"
    if strike <= 0:
        return "strike must be positive"
    if maturity < 0:
        return "maturity must be non-negative"
    if price < 0:
        return "price must be non-negative"
    return None


def bound_violation(quote: OptionQuote, frame: MarketFrame, tol: float = BOUND_TOL) -> str | None:
    """Describe how ``quote`` breaks the static price bounds, or return None.

    Calls must lie in ``[0, S0]`` and puts in ``[0, K]``; the slack is
    ``tol * spot``.
    """
    slack = tol * frame.spot
    upper = frame.spot if frame.kind is OptionKind.CALL else quote.strike
    if quote.price > upper + slack:
        return f"price {quote.price:g} exceeds upper bound {upper:g}"
    if quote.price < -slack:
        return f"price {quote.price:g} is negative"
    return None


def _positive_part(x):
    if isinstance(x, torch.Tensor):
        return torch.clamp(x, min=0.0)
    return np.maximum(x, 0.0)


def _exp(x):
    if isinstance(x, torch.Tensor):
        return torch.exp(x)
    return np.exp(x)


def scale_coordinates(strike, maturity, frame: MarketFrame):
    """Map (K, T) to (k, t) = (exp(-rT) K / K_max, T / T_max), elementwise."""
    k = _exp(-frame.rate * maturity) * strike / frame.k_max
    t = maturity / frame.t_max
    return k, t


def unscale_coordinates(k, t, frame: MarketFrame):
    maturity = t * frame.t_max
    strike = k * frame.k_max * _exp(frame.rate * maturity)
    return strike, maturity


def scale_quote(quote: OptionQuote, frame: MarketFrame, tol: float = SCALE_TOL) -> ScaledQuote:
    k = math.exp(-frame.rate * quote.maturity) * quote.strike / frame.k_max
    t = quote.maturity / frame.t_max
    if t > 1.0 + tol:
        raise OutOfDomain(f"maturity {quote.maturity} beyond t_max={frame.t_max}")
    if k > 1.0 + tol:
        raise OutOfDomain(f"strike {quote.strike} maps to k={k:.12g} > 1")
    return ScaledQuote(price=quote.price, k=min(k, 1.0), t=min(t, 1.0))


def scale_quotes(quotes: Iterable[OptionQuote], frame: MarketFrame) -> list[ScaledQuote]:
    return [scale_quote(q, frame) for q in quotes]


def eta_from_sigma(sigma, t_max: float):
    """Scaled squared volatility ``T_max * sigma**2 / 2``."""
    return 0.5 * t_max * sigma * sigma


def unscale_volatility(eta, frame_or_t_max: "MarketFrame | float"):
    """Annualised volatility ``sqrt(2 eta / T_max)``."""
    t_max = frame_or_t_max.t_max if isinstance(frame_or_t_max, MarketFrame) else float(frame_or_t_max)
    if isinstance(eta, torch.Tensor):
        if bool((eta < 0).any()):
            raise NegativeInput("eta must be non-negative")
        return torch.sqrt(2.0 * eta / t_max)
    arr = np.asarray(eta, dtype=float)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise NegativeInput("eta must be non-negative")
    out = np.sqrt(2.0 * arr / t_max)
    return float(out) if out.ndim == 0 else out


def initial_payoff(k, frame: MarketFrame):
    """Option value at t = 0 as a function of scaled strike."""
    if frame.kind is OptionKind.CALL:
        return _positive_part(frame.spot - frame.k_max * k)
    return _positive_part(frame.k_max * k - frame.spot)


def dupire_residual(jet: SurfaceJet, eta, k):
    """Scaled Dupire residual ``d_t - eta k^2 d_kk``; zero for a consistent pair."""
    return jet.d_t - eta * k * k * jet.d_kk


def arbitrage_functional(jet: SurfaceJet, k, frame: MarketFrame):
    """Combined calendar/butterfly functional; negative values flag arbitrage."""
    return jet.d_t - frame.rate * frame.t_max * k * _positive_part(jet.d_k)


def balance_weights(values: Sequence[float] | np.ndarray) -> np.ndarray:
    """Per-point loss weights ``1 + N g_i / sum(g)``, returned as constants.

    ``g`` clamps ``sum(v^2) / (N v_i^2)`` into [0.1, 10]; a zero value counts
    as +inf and therefore gets g = 10.  The input is detached, so the
    weights never carry parameter gradients.
    """
    if isinstance(values, torch.Tensor):
        values = values.detach().cpu().numpy()
    v = np.asarray(values, dtype=np.float64).ravel()
    n = v.size
    if n == 0:
        raise EmptyInput("balance_weights needs at least one value")
    scale = np.max(np.abs(v))
    if not np.isfinite(scale):
        raise InvalidInput("balance_weights received non-finite values")
    if scale == 0.0:
        return np.full(n, 2.0)
    u2 = (v / scale) ** 2
    mean_sq = u2.sum() / n
    zero = u2 == 0.0
    ratio = np.empty(n)
    ratio[zero] = np.inf
    with np.errstate(over="ignore"):  # tiny v_i overflow to inf, which clamps to 10 anyway
        ratio[~zero] = mean_sq / u2[~zero]
    g = np.clip(ratio, 0.1, 10.0)
    return 1.0 + n * g / g.sum()


def classical_dupire_sigma(jet: SurfaceJet, strike, frame: MarketFrame, eps: float = DUPIRE_EPS):
    """Local volatility from a jet taken in original (K, T) coordinates.

    ``jet.d_t``, ``jet.d_k`` and ``jet.d_kk`` are dpi/dT, dpi/dK and
    d2pi/dK2.  This is a diagnostic baseline, so it raises instead of
    clamping when the density or the variance is degenerate.
    """
    numerator = 2.0 * jet.d_t + 2.0 * frame.rate * strike * jet.d_k
    denominator = strike * strike * jet.d_kk
    num = np.asarray(numerator, dtype=float)
    den = np.asarray(denominator, dtype=float)
    if np.any(~(den > eps)):
        raise DegenerateDensity(f"K^2 d2pi/dK2 = {den} is not above {eps}")
    if np.any(num < 0):
        raise NegativeVariance(f"negative Dupire numerator {num}")
    out = np.sqrt(num / den)
    return float(out) if out.ndim == 0 else out
