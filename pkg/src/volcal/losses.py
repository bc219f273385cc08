"""Collocation sampling and the four calibration losses.

Loss functions return scalar torch tensors that stay differentiable with
respect to the network parameters.  Balancing weights are computed from
detached values and enter as constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np
import torch

from .core import (
    MarketFrame,
    ScaledQuote,
    SurfaceJet,
    arbitrage_functional,
    balance_weights,
    dupire_residual,
    initial_payoff,
)
from .errors import EmptyInput
from .nets import PriceSurfaceModel, VolSurfaceModel, eta_eval, price_jet, price_value


@dataclass(frozen=True)
class CollocationBatch:
    initial_points: torch.Tensor  # (M1,) values of k on the t = 0 line
    domain_k: torch.Tensor  # (M2,)
    domain_t: torch.Tensor  # (M2,)

    @property
    def domain_points(self) -> torch.Tensor:
        return torch.stack([self.domain_k, self.domain_t], dim=1)

    def chunks(self, size: int | None):
        m2 = self.domain_k.shape[0]
        size = m2 if not size or size >= m2 else size
        for lo in range(0, m2, size):
            yield slice(lo, min(lo + size, m2))


@dataclass(frozen=True)
class LossBreakdown:
    fit: Any
    ini: Any
    arb: Any
    dup: Any
    total: Any

    def as_floats(self) -> "LossBreakdown":
        return LossBreakdown(*(float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
                             for v in (self.fit, self.ini, self.arb, self.dup, self.total)))


def sample_batch(m1: int, m2: int, rng: np.random.Generator,
                 dtype: torch.dtype = torch.float64) -> CollocationBatch:
    """Fresh i.i.d. uniform draws: M1 strikes on t = 0 and M2 points in the unit square."""
    if m1 < 1 or m2 < 1:
        raise ValueError("m1 and m2 must be >= 1")
    k0 = rng.random(m1)
    kt = rng.random((m2, 2))
    return CollocationBatch(torch.from_numpy(k0).to(dtype),
                            torch.from_numpy(np.ascontiguousarray(kt[:, 0])).to(dtype),
                            torch.from_numpy(np.ascontiguousarray(kt[:, 1])).to(dtype))


def _weights_like(values, like: torch.Tensor) -> torch.Tensor:
    return torch.from_numpy(balance_weights(values)).to(like.dtype)


def quote_tensors(quotes: Sequence[ScaledQuote], dtype: torch.dtype):
    if not quotes:
        raise EmptyInput("need at least one quote")
    arr = np.array([(q.price, q.k, q.t) for q in quotes], dtype=np.float64)
    price, k, t = (torch.from_numpy(np.ascontiguousarray(arr[:, i])).to(dtype) for i in range(3))
    return price, k, t


def loss_fit(model: PriceSurfaceModel, quotes: Sequence[ScaledQuote]) -> torch.Tensor:
    """Balanced mean squared pricing error over the quotes."""
    price, k, t = quote_tensors(quotes, model.params.dtype)
    err = price_value(model, k, t) - price
    return torch.mean(_weights_like(price, price) * err * err)


def loss_ini(model: PriceSurfaceModel, batch: CollocationBatch, frame: MarketFrame) -> torch.Tensor:
    k = batch.initial_points.to(model.params.dtype)
    if k.numel() == 0:
        raise EmptyInput("no initial collocation points")
    target = initial_payoff(k, frame)
    err = price_value(model, k, torch.zeros_like(k)) - target
    return torch.mean(_weights_like(target, target) * err * err)


def arbitrage_terms(jet: SurfaceJet, k: torch.Tensor, frame: MarketFrame) -> torch.Tensor:
    """Pointwise squared arbitrage violation ``((-f_arb)^+)^2``."""
    violation = torch.clamp(-arbitrage_functional(jet, k, frame), min=0.0)
    return violation * violation


def dupire_terms(jet: SurfaceJet, eta: torch.Tensor, k: torch.Tensor) -> torch.Tensor:
    residual = dupire_residual(jet, eta, k)
    return residual * residual


def loss_arb(model: PriceSurfaceModel, batch: CollocationBatch, frame: MarketFrame,
             jet: SurfaceJet | None = None) -> torch.Tensor:
    dtype = jet.d_t.dtype if jet is not None else model.params.dtype
    k = batch.domain_k.to(dtype)
    if jet is None:
        jet = price_jet(model, k, batch.domain_t.to(dtype))
    w = _weights_like(jet.d_t, k)
    return torch.mean(w * arbitrage_terms(jet, k, frame))


def loss_dup(price_model: PriceSurfaceModel, vol_model: VolSurfaceModel, batch: CollocationBatch,
             jet: SurfaceJet | None = None, eta: torch.Tensor | None = None) -> torch.Tensor:
    """Balanced mean squared Dupire residual on the domain points."""
    dtype = jet.d_t.dtype if jet is not None else price_model.params.dtype
    k = batch.domain_k.to(dtype)
    t = batch.domain_t.to(dtype)
    if jet is None:
        jet = price_jet(price_model, k, t)
    if eta is None:
        eta = eta_eval(vol_model, k, t)
    w = _weights_like(jet.d_t, k)
    return torch.mean(w * dupire_terms(jet, eta, k))


def total_loss(fit, ini, arb, dup, lambda_ini: float = 1.0, lambda_arb: float = 1.0,
               lambda_dup: float = 1.0) -> LossBreakdown:
    if min(lambda_ini, lambda_arb, lambda_dup) < 0:
        raise ValueError("loss weights must be non-negative")
    total = fit + lambda_ini * ini + lambda_arb * arb + lambda_dup * dup
    return LossBreakdown(fit, ini, arb, dup, total)


def compute_losses(price_model: PriceSurfaceModel, vol_model: VolSurfaceModel,
                   quotes: Sequence[ScaledQuote], batch: CollocationBatch,
                   lambda_ini: float = 1.0, lambda_arb: float = 1.0,
                   lambda_dup: float = 1.0) -> LossBreakdown:
    """All four losses on one batch, sharing a single jet evaluation."""
    frame = price_model.frame
    dtype = price_model.params.dtype
    k, t = batch.domain_k.to(dtype), batch.domain_t.to(dtype)
    jet = price_jet(price_model, k, t)
    eta = eta_eval(vol_model, k, t)
    return total_loss(loss_fit(price_model, quotes),
                      loss_ini(price_model, batch, frame),
                      loss_arb(price_model, batch, frame, jet=jet),
                      loss_dup(price_model, vol_model, batch, jet=jet, eta=eta),
                      lambda_ini, lambda_arb, lambda_dup)
