"""Day-ahead prices and the stacked dynamic network tariff.

The network fee has three bands (low/medium/high) whose per-step capacity
depends on the forecast transformer loading: the cheap band covers
whatever headroom remains below 60% of the transformer rating, the medium
band the 60-80% slice, the expensive band the 80-100% slice.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .grid import Network

DEFAULT_FRACTIONS = (0.6, 0.8, 1.0)
DEFAULT_BAND_PRICES = (0.01, 0.05, 0.15)  # EUR/kWh, must be strictly increasing
BAND_NAMES = ("ll", "ml", "hl")


class TariffError(ValueError):
    pass


def load_prices(path, horizon: int) -> np.ndarray:
    """Two-column series (step, EUR/kWh).  Returns (horizon,) array."""
    try:
        with open(path) as fh:
            rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    except OSError as exc:
        raise TariffError(f"cannot read prices file {path}: {exc}") from exc
    try:
        vals = [float(r[-1]) for r in rows]
    except ValueError as exc:
        raise TariffError(f"bad price value in {path}: {exc}") from exc
    prices = np.array(vals)
    if len(prices) != horizon:
        raise TariffError(f"{path}: {len(prices)} prices for horizon {horizon}")
    if not np.all(np.isfinite(prices)):
        raise TariffError(f"{path}: non-finite price")
    return prices


def save_prices(prices: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for t, p in enumerate(prices):
            w.writerow([t, f"{p:.6f}"])


def build_envelopes(
    net: Network,
    fractions,
    forecast_w: np.ndarray,
) -> np.ndarray:
    """Per-step per-band EV charging capacity, shape (len(forecast), 3).

    Band edges are fractions of the transformer rating; each band's
    capacity is the part of its slice left free by the forecast load.
    The lowest band's lower edge is -inf so PV-export headroom accrues to
    the cheap band.
    """
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or not (0 < fr[0] < fr[1] < fr[2] <= 1):
        raise TariffError(f"band fractions must be strictly increasing in (0, 1]: {fr}")
    forecast = np.asarray(forecast_w, dtype=float)
    rated = net.transformer.rated_va
    edges = np.array([-np.inf, fr[0] * rated, fr[1] * rated, fr[2] * rated])
    caps = np.empty((len(forecast), 3))
    for p in range(3):
        caps[:, p] = np.maximum(0.0, edges[p + 1] - np.maximum(forecast, edges[p]))
    return caps


@dataclass(frozen=True)
class StackedTariff:
    band_fractions: tuple
    band_prices: tuple  # EUR/kWh for (ll, ml, hl)
    envelopes: np.ndarray  # (horizon, 3) W

    def __post_init__(self):
        c = self.band_prices
        if not (c[0] < c[1] < c[2]):
            raise TariffError(f"band prices must satisfy ll < ml < hl: {c}")
        if np.any(self.envelopes < 0):
            raise TariffError("negative band envelope")

    @staticmethod
    def from_forecast(
        net: Network,
        forecast_w: np.ndarray,
        fractions=DEFAULT_FRACTIONS,
        prices=DEFAULT_BAND_PRICES,
    ) -> "StackedTariff":
        return StackedTariff(
            band_fractions=tuple(fractions),
            band_prices=tuple(prices),
            envelopes=build_envelopes(net, fractions, forecast_w),
        )


def network_cost(
    tariff: StackedTariff,
    band_powers: np.ndarray,
    dt_hours: float,
    tol_w: float = 1e-3,
) -> float:
    """Sum of band price * band power * dt over the horizon, in EUR."""
    bp = np.asarray(band_powers, dtype=float)
    if bp.shape != tariff.envelopes.shape:
        raise TariffError(f"band power shape {bp.shape} != {tariff.envelopes.shape}")
    if np.any(bp > tariff.envelopes + tol_w):
        t, p = np.unravel_index(int(np.argmax(bp - tariff.envelopes)), bp.shape)
        raise TariffError(
            f"band power exceeds envelope at step {t}, band {BAND_NAMES[p]}: "
            f"{bp[t, p]:.1f} W > {tariff.envelopes[t, p]:.1f} W"
        )
    prices = np.asarray(tariff.band_prices)
    return float(np.sum(bp / 1e3 * prices[None, :]) * dt_hours)
