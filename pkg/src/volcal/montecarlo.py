"""Local-volatility path simulation, Monte Carlo pricing and evaluation.

Paths are simulated in fixed-size chunks, each drawing its normals from its
own Philox substream spawned from the run seed, so results do not depend on
how the work is scheduled.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.special import ndtr

from .core import (
    MarketFrame,
    OptionKind,
    OptionQuote,
    SurfaceJet,
    scale_coordinates,
    unscale_volatility,
)
from .errors import DomainError, MaturityOutOfRange, VolFieldFailure
from .nets import PriceSurfaceModel, VolSurfaceModel, eta_eval, price_value

log = logging.getLogger(__name__)

SIGMA_MAX = 0.3 + math.exp(-1.0)
CHUNK_PATHS = 16384


def sigma_exact(x, t):
    """Synthetic local volatility ``0.3 + y exp(-y)``, ``y = (t + 0.1) sqrt(x + 0.1)``.

    ``x`` is the spot-normalised price S / S0 and ``t`` is calendar time in
    years.
    """
    y = (np.asarray(t, dtype=float) + 0.1) * np.sqrt(np.asarray(x, dtype=float) + 0.1)
    out = 0.3 + y * np.exp(-y)
    return float(out) if np.ndim(out) == 0 else out


class Scheme(str, enum.Enum):
    LOG_EULER = "log_euler"
    EULER = "euler"


@dataclass
class VolatilityField:
    """sigma(S, t) over price in currency and calendar time in years."""

    fn: Callable[[np.ndarray, float], np.ndarray]
    tag: str
    clamped: int = 0  # calibrated fields: queries clipped back into the unit square

    def __call__(self, spot: np.ndarray, t: float) -> np.ndarray:
        return self.fn(spot, t)


def constant_field(sigma: float) -> VolatilityField:
    return VolatilityField(lambda s, t: np.full(np.shape(s), float(sigma)), f"constant:{sigma:g}")


def exact_field(frame: MarketFrame) -> VolatilityField:
    return VolatilityField(lambda s, t: sigma_exact(np.asarray(s) / frame.spot, t), "exact")


def calibrated_field(model: VolSurfaceModel, frame: MarketFrame | None = None) -> VolatilityField:
    """Network volatility queried at the scaled coordinates of (S, t).

    The simulated price plays the role of the strike; points outside the
    unit square are clamped to its boundary and counted.
    """
    frame = frame or model.frame
    field_ = VolatilityField(None, "calibrated")  # type: ignore[arg-type]

    def fn(spot: np.ndarray, t: float) -> np.ndarray:
        k, tt = scale_coordinates(np.asarray(spot, dtype=float), t, frame)
        k = np.broadcast_to(k, np.shape(spot))
        outside = (k < 0) | (k > 1) | (tt < 0) | (tt > 1)
        field_.clamped += int(np.count_nonzero(outside))
        k = np.clip(k, 0.0, 1.0)
        tt = min(max(tt, 0.0), 1.0)
        with torch.no_grad():
            eta = eta_eval(model, torch.from_numpy(k).to(model.params.dtype), tt)
        return unscale_volatility(eta.double().numpy(), frame)

    field_.fn = fn
    return field_


@dataclass(frozen=True)
class SimConfig:
    n_paths: int = 100_000
    dt: float = 0.01
    horizon: float = 1.5
    seed: int = 0
    scheme: Scheme = Scheme.LOG_EULER

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        if self.dt <= 0 or self.horizon < self.dt or self.n_paths < 1:
            raise ValueError("need dt > 0, horizon >= dt and n_paths >= 1")

    @property
    def n_steps(self) -> int:
        return int(math.ceil(self.horizon / self.dt - 1e-9))

    def as_dict(self) -> dict:
        return {"n_paths": self.n_paths, "dt": self.dt, "horizon": self.horizon,
                "seed": self.seed, "scheme": self.scheme.value}


@dataclass
class PathEnsemble:
    """Simulated prices at the monitoring times; ``prices[path, j]`` at ``times[j]``."""

    times: np.ndarray
    prices: np.ndarray
    dt: float
    increments: np.ndarray | None = None
    vol_tag: str = ""

    @property
    def n_paths(self) -> int:
        return self.prices.shape[0]

    def column(self, maturity: float) -> tuple[int, float]:
        """Index of the monitoring time nearest to ``maturity`` and the snap offset."""
        if maturity < -1e-12 or maturity > self.times[-1] + 0.5 * self.dt:
            raise MaturityOutOfRange(f"maturity {maturity} outside [0, {self.times[-1]}]")
        j = int(np.argmin(np.abs(self.times - maturity)))
        offset = float(self.times[j] - maturity)
        if abs(offset) > 0.5 * self.dt + 1e-12:
            raise MaturityOutOfRange(f"maturity {maturity} is not monitored (nearest {self.times[j]})")
        return j, offset


def _normals(sim: SimConfig) -> list[np.ndarray]:
    n_chunks = -(-sim.n_paths // CHUNK_PATHS)
    streams = np.random.SeedSequence(sim.seed).spawn(n_chunks)
    out = []
    for i, ss in enumerate(streams):
        size = min(CHUNK_PATHS, sim.n_paths - i * CHUNK_PATHS)
        out.append(np.random.Generator(np.random.Philox(ss)).standard_normal((size, sim.n_steps)))
    return out


def simulate_paths(vol: VolatilityField, frame: MarketFrame, sim: SimConfig,
                   monitor: Sequence[float] | None = None,
                   increments: np.ndarray | None = None,
                   record_increments: bool = False) -> PathEnsemble:
    """Integrate dS = r S dt + sigma(S, t) S dB from S0.

    ``monitor`` selects which step times are stored (default: all).
    Passing ``increments`` (standard normals, shape (n_paths, n_steps))
    replays a recorded Brownian draw instead of sampling a new one.
    """
    n_steps = sim.n_steps
    grid = np.arange(n_steps + 1) * sim.dt
    if monitor is None:
        cols = np.arange(n_steps + 1)
    else:
        cols = np.unique([int(round(m / sim.dt)) for m in monitor])
        if cols.min() < 0 or cols.max() > n_steps:
            raise MaturityOutOfRange("monitoring time outside the simulated horizon")
    if increments is not None:
        increments = np.asarray(increments, dtype=float)
        if increments.shape != (sim.n_paths, n_steps):
            raise ValueError(f"increments must have shape {(sim.n_paths, n_steps)}")
        chunks = [increments[lo:lo + CHUNK_PATHS] for lo in range(0, sim.n_paths, CHUNK_PATHS)]
    else:
        chunks = _normals(sim)
    col_of_step = {int(c): j for j, c in enumerate(cols)}
    out = np.empty((sim.n_paths, len(cols)))
    sqrt_dt = math.sqrt(sim.dt)
    r = frame.rate
    lo = 0
    for z in chunks:
        s = np.full(z.shape[0], frame.spot)
        rows = slice(lo, lo + z.shape[0])
        if 0 in col_of_step:
            out[rows, col_of_step[0]] = s
        for n in range(n_steps):
            sigma = np.asarray(vol(s, grid[n]), dtype=float)
            if not np.all(np.isfinite(sigma)):
                raise VolFieldFailure(f"non-finite volatility at t={grid[n]:g} ({vol.tag})")
            if sim.scheme is Scheme.LOG_EULER:
                s = s * np.exp((r - 0.5 * sigma * sigma) * sim.dt + sigma * sqrt_dt * z[:, n])
            else:
                s = np.maximum(s * (1.0 + r * sim.dt + sigma * sqrt_dt * z[:, n]), 0.0)
            j = col_of_step.get(n + 1)
            if j is not None:
                out[rows, j] = s
        lo += z.shape[0]
    recorded = None
    if record_increments:
        recorded = increments if increments is not None else np.concatenate(chunks)
    return PathEnsemble(grid[cols], out, sim.dt, recorded, vol.tag)


@dataclass(frozen=True)
class McPrice:
    price: float
    stderr: float
    offset: float = 0.0  # snapped maturity minus requested maturity


def mc_price(paths: PathEnsemble, strike: float, maturity: float, frame: MarketFrame,
             kind: OptionKind | str | None = None) -> McPrice:
    """Discounted sample mean of the payoff and its standard error."""
    kind = OptionKind.parse(kind or frame.kind)
    j, offset = paths.column(maturity)
    s_t = paths.prices[:, j]
    payoff = np.maximum(s_t - strike, 0.0) if kind is OptionKind.CALL else np.maximum(strike - s_t, 0.0)
    disc = math.exp(-frame.rate * paths.times[j])
    n = payoff.size
    std = payoff.std(ddof=1) if n > 1 else 0.0
    return McPrice(disc * payoff.mean(), disc * std / math.sqrt(n), offset)


def price_strip(paths: PathEnsemble, strikes: np.ndarray, maturity: float, frame: MarketFrame,
                kind: OptionKind | str | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Prices and standard errors for many strikes at one maturity.

    Uses sorted prefix sums, so cost is O(n log n + m log n) rather than
    O(n m).
    """
    kind = OptionKind.parse(kind or frame.kind)
    j, _ = paths.column(maturity)
    s = np.sort(paths.prices[:, j])
    n = s.size
    strikes = np.asarray(strikes, dtype=float)
    c1 = np.concatenate([[0.0], np.cumsum(s)])
    c2 = np.concatenate([[0.0], np.cumsum(s * s)])
    idx = np.searchsorted(s, strikes, side="right")
    if kind is OptionKind.CALL:
        cnt = n - idx
        m1 = c1[-1] - c1[idx]
        m2 = c2[-1] - c2[idx]
        first = m1 - strikes * cnt
        second = m2 - 2 * strikes * m1 + strikes ** 2 * cnt
    else:
        cnt = idx
        m1 = c1[idx]
        m2 = c2[idx]
        first = strikes * cnt - m1
        second = strikes ** 2 * cnt - 2 * strikes * m1 + m2
    mean = first / n
    var = np.maximum(second / n - mean ** 2, 0.0) * n / max(n - 1, 1)
    disc = math.exp(-frame.rate * paths.times[j])
    return disc * mean, disc * np.sqrt(var / n)


@dataclass(frozen=True)
class BlackScholes:
    """Price and its maturity/strike derivatives in original coordinates."""

    price: np.ndarray
    d_T: np.ndarray
    d_K: np.ndarray
    d_KK: np.ndarray

    def jet(self) -> SurfaceJet:
        return SurfaceJet(self.price, self.d_T, self.d_K, self.d_KK)


def _npdf(x):
    return np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def bs_closed_form(spot, strike, maturity, rate, sigma,
                   kind: OptionKind | str = OptionKind.CALL) -> BlackScholes:
    kind = OptionKind.parse(kind)
    s0, k, T, r, vol = (np.asarray(v, dtype=float) for v in (spot, strike, maturity, rate, sigma))
    if np.any(s0 <= 0) or np.any(k <= 0) or np.any(T <= 0) or np.any(vol <= 0):
        raise DomainError("Black-Scholes needs positive spot, strike, maturity and volatility")
    sq = vol * np.sqrt(T)
    d1 = (np.log(s0 / k) + (r + 0.5 * vol * vol) * T) / sq
    d2 = d1 - sq
    disc = np.exp(-r * T)
    gamma_k = disc * _npdf(d2) / (k * sq)
    decay = s0 * _npdf(d1) * vol / (2.0 * np.sqrt(T))
    if kind is OptionKind.CALL:
        price = s0 * ndtr(d1) - k * disc * ndtr(d2)
        d_K = -disc * ndtr(d2)
        d_T = decay + r * k * disc * ndtr(d2)
    else:
        price = k * disc * ndtr(-d2) - s0 * ndtr(-d1)
        d_K = disc * ndtr(-d2)
        d_T = decay - r * k * disc * ndtr(-d2)
    return BlackScholes(price, d_T, d_K, gamma_k)


def bs_scaled_jet(k, t, frame: MarketFrame, sigma: float) -> SurfaceJet:
    """Black-Scholes surface expressed in scaled coordinates (k, t)."""
    strike = np.asarray(k, dtype=float) * frame.k_max * np.exp(frame.rate * frame.t_max * np.asarray(t))
    maturity = np.asarray(t, dtype=float) * frame.t_max
    bs = bs_closed_form(frame.spot, strike, maturity, frame.rate, sigma, frame.kind)
    dk_dK = strike / np.asarray(k, dtype=float)  # dK/dk at fixed T
    return SurfaceJet(value=bs.price,
                      d_t=frame.t_max * (bs.d_T + frame.rate * strike * bs.d_K),
                      d_k=bs.d_K * dk_dK,
                      d_kk=bs.d_KK * dk_dK * dk_dK)


@dataclass(frozen=True)
class GridSpec:
    """Rectangular strike x maturity mesh: ``n_t`` maturities by ``n_k`` strikes."""

    n_t: int
    n_k: int
    k_lo: float = 500.0
    k_hi: float = 3000.0
    t_lo: float = 0.3
    t_hi: float = 1.5

    def __post_init__(self):
        if self.n_t < 1 or self.n_k < 1:
            raise ValueError("grid needs at least one node per axis")
        if self.k_lo <= 0 or self.k_hi < self.k_lo or self.t_lo < 0 or self.t_hi < self.t_lo:
            raise ValueError("invalid grid bounds")

    @property
    def strikes(self) -> np.ndarray:
        return np.linspace(self.k_lo, self.k_hi, self.n_k)

    @property
    def maturities(self) -> np.ndarray:
        return np.linspace(self.t_lo, self.t_hi, self.n_t)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """(K, T) arrays of shape (n_t, n_k)."""
        kk, tt = np.meshgrid(self.strikes, self.maturities)
        return kk, tt

    def as_dict(self) -> dict:
        return {"n_t": self.n_t, "n_k": self.n_k, "k_lo": self.k_lo, "k_hi": self.k_hi,
                "t_lo": self.t_lo, "t_hi": self.t_hi}

    @classmethod
    def parse(cls, shape: str, k_range: str | None = None, t_range: str | None = None) -> "GridSpec":
        """From CLI strings such as ``"10x20"``, ``"500:3000"``, ``"0.3:1.5"``."""
        try:
            n_t, n_k = (int(v) for v in shape.lower().split("x"))
            kw = {}
            if k_range:
                kw["k_lo"], kw["k_hi"] = (float(v) for v in k_range.split(":"))
            if t_range:
                kw["t_lo"], kw["t_hi"] = (float(v) for v in t_range.split(":"))
        except ValueError:
            raise ValueError(f"bad grid spec {shape!r} {k_range!r} {t_range!r}") from None
        return cls(n_t, n_k, **kw)


@dataclass
class SyntheticDataset:
    quotes: list[OptionQuote]
    stderrs: list[float]
    provenance: dict = field(default_factory=dict)


def generate_synthetic_dataset(grid: GridSpec, vol: VolatilityField, frame: MarketFrame,
                               sim: SimConfig) -> SyntheticDataset:
    """One Monte Carlo price per grid node, all from one shared path ensemble."""
    if grid.t_hi > sim.horizon + 1e-12:
        raise MaturityOutOfRange("grid maturities exceed the simulated horizon")
    paths = simulate_paths(vol, frame, sim, monitor=grid.maturities)
    quotes, errs = [], []
    for T in grid.maturities:
        for K in grid.strikes:
            p = mc_price(paths, K, T, frame)
            quotes.append(OptionQuote(max(p.price, 0.0), K, T))
            errs.append(p.stderr)
    provenance = {"seed": sim.seed, "n_paths": sim.n_paths, "dt": sim.dt, "scheme": sim.scheme.value,
                  "horizon": sim.horizon, "vol": vol.tag, "grid": f"{grid.n_t}x{grid.n_k}",
                  **{f"frame.{k}": v for k, v in frame.as_dict().items()}}
    return SyntheticDataset(quotes, errs, provenance)


@dataclass(frozen=True)
class RepriceResult:
    rmse: float
    prices: np.ndarray
    stderrs: np.ndarray
    clamped: int


def reprice(vol: VolatilityField, quotes: Sequence[OptionQuote], frame: MarketFrame,
            sim: SimConfig, increments: np.ndarray | None = None) -> RepriceResult:
    maturities = sorted({q.maturity for q in quotes})
    paths = simulate_paths(vol, frame, sim, monitor=maturities, increments=increments)
    res = [mc_price(paths, q.strike, q.maturity, frame) for q in quotes]
    prices = np.array([r.price for r in res])
    target = np.array([q.price for q in quotes])
    rmse = float(np.sqrt(np.mean((prices - target) ** 2)))
    return RepriceResult(rmse, prices, np.array([r.stderr for r in res]), vol.clamped)


def reprice_rmse(vol_model: VolSurfaceModel, quotes: Sequence[OptionQuote], frame: MarketFrame,
                 sim: SimConfig) -> float:
    """RMSE between the quotes and Monte Carlo prices under the calibrated volatility."""
    result = reprice(calibrated_field(vol_model, frame), quotes, frame, sim)
    if result.clamped:
        log.info("calibrated field clamped %d queries to the unit square", result.clamped)
    return result.rmse


def surface_rmse(a, b) -> float:
    """Root-mean-square of pointwise differences between two equally shaped grids."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"grid shapes differ: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def model_vol_grid(vol_model: VolSurfaceModel, strikes: np.ndarray, maturities: np.ndarray,
                   frame: MarketFrame | None = None) -> np.ndarray:
    """Calibrated sigma on the (T, K) mesh, shape (len(maturities), len(strikes))."""
    frame = frame or vol_model.frame
    kk, tt = np.meshgrid(strikes, maturities)
    k, t = scale_coordinates(kk, tt, frame)
    with torch.no_grad():
        eta = eta_eval(vol_model, torch.from_numpy(k), torch.from_numpy(t))
    return unscale_volatility(eta.double().numpy(), frame)


def exact_vol_grid(strikes: np.ndarray, maturities: np.ndarray, frame: MarketFrame) -> np.ndarray:
    kk, tt = np.meshgrid(strikes, maturities)
    return sigma_exact(kk / frame.spot, tt)


def model_price_grid(price_model: PriceSurfaceModel, strikes: np.ndarray, maturities: np.ndarray,
                     frame: MarketFrame | None = None) -> np.ndarray:
    frame = frame or price_model.frame
    kk, tt = np.meshgrid(strikes, maturities)
    k, t = scale_coordinates(kk, tt, frame)
    with torch.no_grad():
        return price_value(price_model, torch.from_numpy(k), torch.from_numpy(t)).double().numpy()


def mc_price_grid(paths: PathEnsemble, strikes: np.ndarray, maturities: np.ndarray,
                  frame: MarketFrame) -> np.ndarray:
    return np.stack([price_strip(paths, strikes, T, frame)[0] for T in maturities])


def snapped_maturities(maturities: np.ndarray, dt: float) -> np.ndarray:
    """Maturities rounded to the simulation step, so MC references need no interpolation."""
    return np.round(np.asarray(maturities) / dt) * dt


def local_vol_rmse(vol_model: VolSurfaceModel, grid: GridSpec, frame: MarketFrame) -> float:
    return surface_rmse(model_vol_grid(vol_model, grid.strikes, grid.maturities, frame),
                        exact_vol_grid(grid.strikes, grid.maturities, frame))
