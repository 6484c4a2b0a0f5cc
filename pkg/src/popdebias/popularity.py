"""Popularity drift (JSD between stage distributions) and next-stage forecasting."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import PopularityTable


@dataclass(frozen=True)
class DriftSeries:
    successive: np.ndarray   # DP(t, t+1), t = 1..T-1
    accumulated: np.ndarray  # DP(1, t),   t = 2..T

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("stage,dp_successive,dp_accumulated\n")
            for k, (s, a) in enumerate(zip(self.successive, self.accumulated)):
                fh.write(f"{k + 2},{s:.12g},{a:.12g}\n")


@dataclass(frozen=True)
class PopularityForecast:
    m_tilde: np.ndarray
    alpha: float


def _log(x, base):
    return np.log(x) if base == "e" else np.log(x) / math.log(float(base))


def jsd(p, q, base="e") -> float:
    """Jensen-Shannon divergence with 0*log(0) = 0. Natural log unless ``base`` given."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("negative probability")
    if abs(p.sum() - 1) > 1e-6 or abs(q.sum() - 1) > 1e-6:
        raise ValueError("distributions must sum to 1")
    mid = 0.5 * (p + q)

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * _log(a[nz] / mid[nz], base)))

    # clip tiny negative rounding
    return max(0.0, 0.5 * kl(p) + 0.5 * kl(q))


def drift(pop: PopularityTable, t: int, s: int, base="e") -> float:
    for k in (t, s):
        if pop.D[k].sum() == 0:
            raise ValueError(f"stage {k} is empty")
    if t == s:
        return 0.0
    return jsd(pop.m[t], pop.m[s], base=base)


def drift_series(pop: PopularityTable, base="e") -> DriftSeries:
    if pop.T < 2:
        raise ValueError("drift series needs at least two stages")
    succ = np.array([drift(pop, t, t + 1, base) for t in range(pop.T - 1)])
    acc = np.array([drift(pop, 0, t, base) for t in range(1, pop.T)])
    return DriftSeries(succ, acc)


def forecast_popularity(m_T, m_Tm1, alpha: float, floor: float = 1e-6) -> PopularityForecast:
    """Linear extrapolation ``m_T + alpha * (m_T - m_Tm1)`` clamped below at ``floor``."""
    m_T = np.asarray(m_T, dtype=np.float64)
    m_Tm1 = np.asarray(m_Tm1, dtype=np.float64)
    if m_T.shape != m_Tm1.shape:
        raise ValueError(f"dimension mismatch: {m_T.shape} vs {m_Tm1.shape}")
    if floor <= 0:
        raise ValueError("floor must be positive")
    raw = m_T + alpha * (m_T - m_Tm1)
    return PopularityForecast(np.maximum(raw, floor), float(alpha))
