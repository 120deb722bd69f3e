"""Byzantine-robust aggregation rules.

Median, Trimmed-Mean, Krum and Multi-Krum ignore reported sample sizes.
Norm-Bounding clips each delta and then keeps the size-weighted average.
"""

from __future__ import annotations

import math

import numpy as np

from .fedcore import AggregationError, ConfigError, fedavg_aggregate
from .params import ModelUpdate, l2_norm

DEFENSE_NAMES = ("none", "median", "trimmed_mean", "krum", "multi_krum", "norm_bounding")


def _stack(updates) -> np.ndarray:
    if len(updates) == 0:
        raise AggregationError("no updates to aggregate")
    return np.stack([u.delta if isinstance(u, ModelUpdate) else np.asarray(u, dtype=np.float64)
                     for u in updates])


def median_agg(updates) -> np.ndarray:
    return np.median(_stack(updates), axis=0)


def trimmed_mean_agg(updates, beta: float) -> np.ndarray:
    """Per coordinate, drop the ``floor(beta * k)`` smallest and largest values."""
    U = _stack(updates)
    k = len(U)
    if not 0 <= beta < 0.5:
        raise ConfigError("trim fraction beta must lie in [0, 0.5)")
    t = int(math.floor(beta * k))
    if k - 2 * t < 1:
        raise ConfigError(f"trimming {t} per side leaves nothing out of {k}")
    S = np.sort(U, axis=0)
    return S[t:k - t].mean(axis=0)


def pairwise_sq_dists(U: np.ndarray) -> np.ndarray:
    D = np.empty((len(U), len(U)))
    for i in range(len(U)):
        D[i] = np.sum((U - U[i]) ** 2, axis=1)
    return D


def krum_scores(D: np.ndarray, active, f: int) -> np.ndarray:
    """Krum scores of ``active`` rows, using only distances among ``active``."""
    active = np.asarray(active)
    k = len(active)
    n_near = k - f - 2
    if n_near < 1:
        raise ConfigError(f"Krum needs k >= f + 3 (k={k}, f={f})")
    sub = D[np.ix_(active, active)]
    scores = np.empty(k)
    for i in range(k):
        others = np.sort(np.delete(sub[i], i))
        scores[i] = np.sum(others[:n_near])
    return scores


def multi_krum_order(D: np.ndarray, f: int, c: int, stop_at: int | None = None) -> list[int]:
    """Indices chosen by ``c`` rounds of Krum with removal.

    Scores are recomputed over the remaining rows after every pick; ties go
    to the lowest index. Stops early once ``stop_at`` is picked.
    """
    k = len(D)
    if not 1 <= c <= k - f - 2:
        raise ConfigError(f"multi-krum needs 1 <= c <= k - f - 2 (k={k}, f={f}, c={c})")
    remaining = list(range(k))
    chosen = []
    for _ in range(c):
        scores = krum_scores(D, remaining, f)
        pick = remaining[int(np.argmin(scores))]
        chosen.append(pick)
        remaining.remove(pick)
        if pick == stop_at:
            break
    return chosen


def krum_select(updates, f: int) -> tuple[int, np.ndarray]:
    U = _stack(updates)
    if f < 0:
        raise ConfigError("f must be non-negative")
    scores = krum_scores(pairwise_sq_dists(U), np.arange(len(U)), f)
    idx = int(np.argmin(scores))
    return idx, U[idx]


def multi_krum_agg(updates, f: int, c: int, return_indices: bool = False):
    U = _stack(updates)
    chosen = multi_krum_order(pairwise_sq_dists(U), f, c)
    out = U[chosen].mean(axis=0)
    return (out, chosen) if return_indices else out


def norm_bound_agg(updates, rho: float) -> np.ndarray:
    if not rho > 0:
        raise ConfigError("norm bound rho must be positive")
    clipped = []
    for u in updates:
        norm = l2_norm(u.delta)
        scale = min(1.0, rho / norm) if norm > 0 else 1.0
        clipped.append(ModelUpdate(u.delta * scale, u.sample_size))
    return fedavg_aggregate(clipped)


def default_f(k: int) -> int:
    return int(math.ceil(0.1 * k))


class DefenseRule:
    """A configured aggregation rule, callable by the round loop.

    ``f`` and ``c`` default per round to ``ceil(0.1 k)`` and ``k - f - 2``.
    A missing ``rho`` for norm bounding is calibrated by the round loop.
    """

    def __init__(self, name: str, f: int | None = None, c: int | None = None,
                 beta: float = 0.1, rho: float | None = None):
        if name not in DEFENSE_NAMES or name == "none":
            raise ConfigError(f"unknown defense {name!r}; valid: {', '.join(DEFENSE_NAMES)}")
        if f is not None and f < 0:
            raise ConfigError("f must be non-negative")
        if c is not None and c < 1:
            raise ConfigError("c must be >= 1")
        if not 0 <= beta < 0.5:
            raise ConfigError("beta must lie in [0, 0.5)")
        if rho is not None and not rho > 0:
            raise ConfigError("rho must be positive")
        self.name, self.f, self.c, self.beta, self.rho = name, f, c, beta, rho

    @property
    def needs_calibration(self) -> bool:
        return self.name == "norm_bounding" and self.rho is None

    def calibrated(self, rho: float) -> "DefenseRule":
        return DefenseRule(self.name, self.f, self.c, self.beta, rho)

    def aggregate(self, updates):
        k = len(updates)
        meta = {"rule": self.name}
        if self.name == "median":
            return median_agg(updates), meta
        if self.name == "trimmed_mean":
            return trimmed_mean_agg(updates, self.beta), meta
        f = self.f if self.f is not None else default_f(k)
        if self.name in ("krum", "multi_krum"):
            if k < f + 3:
                raise AggregationError(f"{self.name} needs at least f + 3 = {f + 3} updates, got {k}")
            meta["f"] = f
        if self.name == "krum":
            idx, vec = krum_select(updates, f)
            meta["selected"] = [idx]
            return vec, meta
        if self.name == "multi_krum":
            c = self.c if self.c is not None else k - f - 2
            vec, chosen = multi_krum_agg(updates, f, min(c, k - f - 2), return_indices=True)
            meta["selected"] = chosen
            return vec, meta
        if self.rho is None:
            raise ConfigError("norm bounding needs rho (or calibration)")
        meta["rho"] = self.rho
        return norm_bound_agg(updates, self.rho), meta


def make_defense(name: str, **params):
    if name in (None, "none"):
        return None
    return DefenseRule(name, **params)
