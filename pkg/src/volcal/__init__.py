"""Neural local-volatility calibration with a Dupire penalty."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    MarketFrame,
    OptionKind,
    OptionQuote,
    ScaledQuote,
    SurfaceJet,
    arbitrage_functional,
    balance_weights,
    classical_dupire_sigma,
    dupire_residual,
    eta_from_sigma,
    scale_coordinates,
    scale_quote,
    scale_quotes,
    unscale_coordinates,
    unscale_volatility,
)
from .nets import NetConfig, NetParams, PriceSurfaceModel, VolSurfaceModel, init_params  # noqa: E402
from .trainer import TrainConfig, Trainer, train  # noqa: E402

__all__ = [
    "MarketFrame", "OptionKind", "OptionQuote", "ScaledQuote", "SurfaceJet",
    "arbitrage_functional", "balance_weights", "classical_dupire_sigma", "dupire_residual",
    "eta_from_sigma", "scale_coordinates", "scale_quote", "scale_quotes",
    "unscale_coordinates", "unscale_volatility",
    "NetConfig", "NetParams", "PriceSurfaceModel", "VolSurfaceModel", "init_params",
    "TrainConfig", "Trainer", "train",
]
