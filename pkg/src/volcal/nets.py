"""Residual tanh networks and the boundary-enforcing price/volatility ansatze.

Input derivatives are propagated analytically, layer by layer, as four
streams: the value and its k-, t- and kk-derivatives.  Every operation is
an ordinary torch op, so a single reverse pass gives exact parameter
gradients of any loss built from jet entries.
"""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
import torch

from .core import MarketFrame, OptionKind, SurfaceJet, unscale_volatility
from .errors import NonFiniteGradient, NonFiniteParams, VersionMismatch
from .formats import read_container, write_container

N_INPUTS = 2


class Normalization(str, enum.Enum):
    NONE = "none"
    PER_LAYER_AFFINE = "per_layer_affine"


@dataclass(frozen=True)
class NetConfig:
    blocks: int = 3
    width: int = 64
    hidden_activation: str = "tanh"
    output_activation: str = "softplus"
    normalization: Normalization = Normalization.NONE

    def __post_init__(self):
        object.__setattr__(self, "normalization", Normalization(self.normalization))
        if self.blocks < 1 or self.width < 1:
            raise ValueError("blocks and width must be >= 1")
        if self.hidden_activation != "tanh" or self.output_activation != "softplus":
            raise ValueError("only tanh hidden / softplus output activations are supported")

    def as_dict(self) -> dict:
        return {"blocks": self.blocks, "width": self.width,
                "hidden_activation": self.hidden_activation,
                "output_activation": self.output_activation,
                "normalization": self.normalization.value}

    def layout(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(name, shape, offset) for every parameter tensor, in storage order."""
        w = self.width
        shapes: list[tuple[str, tuple[int, ...]]] = [("lift.weight", (w, N_INPUTS)), ("lift.bias", (w,))]
        affine = self.normalization is Normalization.PER_LAYER_AFFINE
        for i in range(self.blocks):
            for j in (1, 2):
                shapes.append((f"block{i}.weight{j}", (w, w)))
                shapes.append((f"block{i}.bias{j}", (w,)))
                if affine:
                    shapes.append((f"block{i}.gain{j}", (w,)))
                    shapes.append((f"block{i}.shift{j}", (w,)))
        shapes += [("head.weight", (1, w)), ("head.bias", (1,))]
        out, offset = [], 0
        for name, shape in shapes:
            out.append((name, shape, offset))
            offset += math.prod(shape)
        return out

    @property
    def n_params(self) -> int:
        return sum(math.prod(shape) for _, shape, _ in self.layout())


@dataclass(frozen=True)
class NetParams:
    """Flat parameter vector plus the config that fixes its layout."""

    config: NetConfig
    flat: torch.Tensor
    seed: int | None = None

    def __post_init__(self):
        if self.flat.ndim != 1 or self.flat.numel() != self.config.n_params:
            raise ValueError(f"expected {self.config.n_params} parameters, got {tuple(self.flat.shape)}")

    @property
    def dtype(self) -> torch.dtype:
        return self.flat.dtype

    def unpack(self) -> dict[str, torch.Tensor]:
        return {name: self.flat[off:off + math.prod(shape)].view(shape)
                for name, shape, off in self.config.layout()}

    def with_flat(self, flat: torch.Tensor) -> "NetParams":
        return replace(self, flat=flat)

    def to(self, dtype: torch.dtype) -> "NetParams":
        return replace(self, flat=self.flat.detach().to(dtype))

    def check_finite(self) -> None:
        if not bool(torch.isfinite(self.flat).all()):
            raise NonFiniteParams("network parameters contain NaN or inf")


def init_params(config: NetConfig, seed: int, dtype: torch.dtype = torch.float64) -> NetParams:
    """Glorot-uniform weights, zero biases, unit gains; deterministic in ``seed``."""
    rng = np.random.Generator(np.random.Philox(seed))
    flat = np.zeros(config.n_params)
    for name, shape, off in config.layout():
        size = math.prod(shape)
        if "weight" in name:
            fan_out, fan_in = shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            flat[off:off + size] = rng.uniform(-bound, bound, size)
        elif "gain" in name:
            flat[off:off + size] = 1.0
    return NetParams(config, torch.from_numpy(flat).to(dtype), seed)


def zero_params(config: NetConfig, dtype: torch.dtype = torch.float64) -> NetParams:
    return NetParams(config, torch.zeros(config.n_params, dtype=dtype))


def _softplus(x: torch.Tensor) -> torch.Tensor:
    return torch.clamp(x, min=0.0) + torch.log1p(torch.exp(-torch.abs(x)))


def _inputs(k, t, dtype) -> tuple[torch.Tensor, torch.Tensor, torch.Size]:
    k = torch.as_tensor(k, dtype=dtype)
    t = torch.as_tensor(t, dtype=dtype)
    k, t = torch.broadcast_tensors(k, t)
    return k.reshape(-1), t.reshape(-1), k.shape


def _forward_value(params: NetParams, k: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    p = params.unpack()
    cfg = params.config
    affine = cfg.normalization is Normalization.PER_LAYER_AFFINE
    x = torch.stack([k, t], dim=1)
    h = x @ p["lift.weight"].T + p["lift.bias"]
    for i in range(cfg.blocks):
        z = torch.tanh(h) @ p[f"block{i}.weight1"].T + p[f"block{i}.bias1"]
        if affine:
            z = z * p[f"block{i}.gain1"] + p[f"block{i}.shift1"]
        z = torch.tanh(z) @ p[f"block{i}.weight2"].T + p[f"block{i}.bias2"]
        if affine:
            z = z * p[f"block{i}.gain2"] + p[f"block{i}.shift2"]
        h = h + z
    o = h @ p["head.weight"].T + p["head.bias"]
    return _softplus(o[:, 0])


def _tanh_jet(v, d_k, d_t, d_kk):
    a = torch.tanh(v)
    d1 = 1.0 - a * a
    curv = -2.0 * a * d1 * d_k * d_k
    if d_kk is not None:
        curv = curv + d1 * d_kk
    return a, d1 * d_k, d1 * d_t, curv


def _forward_jet(params: NetParams, k: torch.Tensor, t: torch.Tensor) -> tuple[torch.Tensor, ...]:
    """N, dN/dk, dN/dt, d2N/dk2 as four (M,) tensors.

    The streams are kept as separate tensors: stacking them into one GEMM
    costs more in copies than it saves.
    """
    p = params.unpack()
    cfg = params.config
    affine = cfg.normalization is Normalization.PER_LAYER_AFFINE
    m = k.shape[0]
    lw = p["lift.weight"]
    h = torch.addmm(p["lift.bias"], torch.stack([k, t], dim=1), lw.T)
    h_k = lw[:, 0].expand(m, -1)
    h_t = lw[:, 1].expand(m, -1)
    h_kk = None  # the lift is affine in (k, t)
    for i in range(cfg.blocks):
        z = (h, h_k, h_t, h_kk)
        for j in (1, 2):
            a, a_k, a_t, a_kk = _tanh_jet(*z)
            w = p[f"block{i}.weight{j}"].T
            z = (torch.addmm(p[f"block{i}.bias{j}"], a, w), a_k @ w, a_t @ w, a_kk @ w)
            if affine:
                gain, shift = p[f"block{i}.gain{j}"], p[f"block{i}.shift{j}"]
                z = (z[0] * gain + shift, z[1] * gain, z[2] * gain, z[3] * gain)
        h, h_k, h_t = h + z[0], h_k + z[1], h_t + z[2]
        h_kk = z[3] if h_kk is None else h_kk + z[3]
    w = p["head.weight"][0]
    o = h @ w + p["head.bias"]
    o_k, o_t = h_k @ w, h_t @ w
    o_kk = h_kk @ w
    s = torch.sigmoid(o)
    return _softplus(o), s * o_k, s * o_t, s * (1.0 - s) * o_k * o_k + s * o_kk


def net_forward(params: NetParams, k, t) -> torch.Tensor:
    """Network output (>= 0) at broadcast (k, t)."""
    params.check_finite()
    kk, tt, shape = _inputs(k, t, params.dtype)
    return _forward_value(params, kk, tt).reshape(shape)


def net_jet(params: NetParams, k, t) -> tuple[torch.Tensor, ...]:
    """(N, N_k, N_t, N_kk) at broadcast (k, t)."""
    params.check_finite()
    kk, tt, shape = _inputs(k, t, params.dtype)
    return tuple(row.reshape(shape) for row in _forward_jet(params, kk, tt))


@dataclass(frozen=True)
class PriceSurfaceModel:
    """Price surface ``S0 (1 - exp(-(1-k) N))`` for calls,
    ``K_max exp(r T_max t) k (1 - exp(-k N))`` for puts."""

    params: NetParams
    frame: MarketFrame
    kind: OptionKind | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", OptionKind.parse(self.kind or self.frame.kind))


@dataclass(frozen=True)
class VolSurfaceModel:
    params: NetParams
    frame: MarketFrame


def price_value(model: PriceSurfaceModel, k, t) -> torch.Tensor:
    n = net_forward(model.params, k, t)
    kk, tt, shape = _inputs(k, t, model.params.dtype)
    kk, tt = kk.reshape(shape), tt.reshape(shape)
    if model.kind is OptionKind.CALL:
        return -model.frame.spot * torch.expm1(-(1.0 - kk) * n)
    f = model.frame
    return -f.k_max * torch.exp(f.rate * f.t_max * tt) * kk * torch.expm1(-kk * n)


def price_jet(model: PriceSurfaceModel, k, t) -> SurfaceJet:
    """Value, d/dt, d/dk and d2/dk2 of the full price ansatz."""
    n, n_k, n_t, n_kk = net_jet(model.params, k, t)
    kk, tt, shape = _inputs(k, t, model.params.dtype)
    kk, tt = kk.reshape(shape), tt.reshape(shape)
    f = model.frame
    if model.kind is OptionKind.CALL:
        s0 = f.spot
        u = (1.0 - kk) * n
        u_k = -n + (1.0 - kk) * n_k
        u_kk = -2.0 * n_k + (1.0 - kk) * n_kk
        u_t = (1.0 - kk) * n_t
        e = torch.exp(-u)
        return SurfaceJet(value=-s0 * torch.expm1(-u),
                          d_t=s0 * e * u_t,
                          d_k=s0 * e * u_k,
                          d_kk=s0 * e * (u_kk - u_k * u_k))
    growth = f.k_max * torch.exp(f.rate * f.t_max * tt)
    u = kk * n
    u_k = n + kk * n_k
    u_kk = 2.0 * n_k + kk * n_kk
    u_t = kk * n_t
    e = torch.exp(-u)
    q = -kk * torch.expm1(-u)
    q_k = -torch.expm1(-u) + kk * e * u_k
    q_kk = 2.0 * e * u_k + kk * e * (u_kk - u_k * u_k)
    q_t = kk * e * u_t
    return SurfaceJet(value=growth * q,
                      d_t=growth * (f.rate * f.t_max * q + q_t),
                      d_k=growth * q_k,
                      d_kk=growth * q_kk)


def eta_eval(model: VolSurfaceModel, k, t) -> torch.Tensor:
    """Scaled squared local volatility at (k, t); non-negative by construction."""
    return net_forward(model.params, k, t)


def sigma_eval(model: VolSurfaceModel, k, t) -> torch.Tensor:
    return unscale_volatility(eta_eval(model, k, t), model.frame)


def param_gradient(loss: Callable[[NetParams], torch.Tensor], params: NetParams) -> torch.Tensor:
    """Exact gradient of ``loss(params)`` with respect to the flat vector."""
    flat = params.flat.detach().clone().requires_grad_(True)
    value = loss(params.with_flat(flat))
    (grad,) = torch.autograd.grad(value, flat, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(flat)
    if not bool(torch.isfinite(grad).all()):
        raise NonFiniteGradient("parameter gradient is not finite")
    return grad


def params_header(params: NetParams) -> dict:
    return {"config": params.config.as_dict(),
            "layout": [[name, list(shape), off] for name, shape, off in params.config.layout()],
            "seed": params.seed,
            "dtype": str(params.dtype).replace("torch.", "")}


def params_from_header(header: dict, flat: np.ndarray) -> NetParams:
    try:
        config = NetConfig(**header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise VersionMismatch(f"bad network config: {exc}") from None
    layout = [[name, list(shape), off] for name, shape, off in config.layout()]
    if header.get("layout") != layout or flat.size != config.n_params:
        raise VersionMismatch("parameter layout does not match its config")
    return NetParams(config, torch.from_numpy(flat.copy()), header.get("seed"))


def save_params(params: NetParams, path: str | os.PathLike) -> None:
    write_container(path, {"kind": "net-params", **params_header(params)},
                    {"flat": params.flat.detach().cpu().numpy()})


def load_params(path: str | os.PathLike, expect: NetConfig | None = None) -> NetParams:
    header, arrays = read_container(path)
    if header.get("kind") != "net-params" or "flat" not in arrays:
        raise VersionMismatch(f"{path}: not a parameter file")
    params = params_from_header(header, arrays["flat"])
    if expect is not None and params.config != expect:
        raise VersionMismatch(f"{path}: config {params.config} != expected {expect}")
    return params
