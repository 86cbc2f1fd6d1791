"""Binary Hopfield network with Hebbian storage.

States are ±1 vectors. ``store`` builds the normalised Hebbian coupling
matrix ``T = (1/N) Σ_μ ξ^μ ξ^μᵀ`` with a zeroed diagonal; dynamics are
asynchronous sign updates that never raise the quadratic energy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError, ParameterError

# Relative threshold under which a local field counts as an exact tie.
# Hebbian couplings carry a 1/N factor, so a field that is mathematically
# zero can come out as ~1e-17 after rounding.
TIE_RTOL = 1e-12


def as_bipolar(state, n: Optional[int] = None) -> np.ndarray:
    """Validate a ±1 vector and return it as a float64 copy."""
    arr = np.array(state, dtype=np.float64).ravel()
    if not np.all(np.abs(arr) == 1.0):
        raise ParameterError("state entries must all be exactly +1 or -1")
    if n is not None and arr.size != n:
        raise DimensionError(f"state has length {arr.size}, expected {n}")
    return arr


@dataclass(frozen=True)
class PatternStore:
    """K stored ±1 patterns, one per row."""

    patterns: np.ndarray

    def __post_init__(self):
        p = np.array(self.patterns, dtype=np.float64)
        if p.ndim == 1:
            p = p[None, :]
        if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
            raise ParameterError(f"pattern store must be a non-empty K×N matrix, got shape {p.shape}")
        if not np.all(np.abs(p) == 1.0):
            raise ParameterError("stored patterns must be ±1")
        p.setflags(write=False)
        object.__setattr__(self, "patterns", p)

    @property
    def K(self) -> int:
        return self.patterns.shape[0]

    @property
    def N(self) -> int:
        return self.patterns.shape[1]

    @classmethod
    def random(cls, k: int, n: int, rng: np.random.Generator) -> "PatternStore":
        return cls(rng.choice(np.array([-1.0, 1.0]), size=(k, n)))


def _as_store(patterns) -> PatternStore:
    return patterns if isinstance(patterns, PatternStore) else PatternStore(patterns)


def store(patterns) -> np.ndarray:
    """Hebbian couplings, symmetric with zero diagonal."""
    ps = _as_store(patterns)
    xi = ps.patterns
    T = (xi.T @ xi) / ps.N
    np.fill_diagonal(T, 0.0)
    return T


def _check_weights(T: np.ndarray, n: int) -> np.ndarray:
    T = np.asarray(T, dtype=np.float64)
    if T.shape != (n, n):
        raise DimensionError(f"weights have shape {T.shape}, state has length {n}")
    return T


def energy(T: np.ndarray, state) -> float:
    """``-½ Σ_{i≠j} T_ij σ_i σ_j``."""
    s = as_bipolar(state)
    T = _check_weights(T, s.size)
    off = T - np.diag(np.diag(T))
    return float(-0.5 * s @ off @ s)


def _check_order(order, n: int) -> np.ndarray:
    idx = np.asarray(order if order is not None else np.arange(n))
    if idx.ndim != 1 or idx.size != n or not np.array_equal(np.sort(idx), np.arange(n)):
        raise ParameterError(f"update order must be a permutation of 0..{n - 1}")
    return idx.astype(np.int64)


def signed_update(current: float, field: float, scale: float) -> float:
    """Sign rule with ties (|field| within rounding of zero) keeping ``current``."""
    if abs(field) <= TIE_RTOL * scale:
        return current
    return 1.0 if field > 0 else -1.0


def _update_site(T: np.ndarray, s: np.ndarray, i: int) -> None:
    row = T[i]
    field = row @ s - row[i] * s[i]
    s[i] = signed_update(s[i], field, np.abs(row).sum())


def update_site(T: np.ndarray, state, i: int) -> np.ndarray:
    """Update spin ``i`` alone; returns a new state."""
    s = as_bipolar(state)
    T = _check_weights(T, s.size)
    if not 0 <= i < s.size:
        raise ParameterError(f"site {i} out of range for N={s.size}")
    _update_site(T, s, i)
    return s


def update_async(T: np.ndarray, state, order: Optional[Sequence[int]] = None) -> np.ndarray:
    """One asynchronous sweep in ``order``; returns the new state."""
    s = as_bipolar(state)
    T = _check_weights(T, s.size)
    for i in _check_order(order, s.size):
        _update_site(T, s, i)
    return s


def update_sync(T: np.ndarray, state) -> np.ndarray:
    """All spins at once from the same old state (no energy guarantee)."""
    s = as_bipolar(state)
    T = _check_weights(T, s.size)
    off = T - np.diag(np.diag(T))
    fields = off @ s
    scales = np.abs(off).sum(axis=1)
    return np.array([signed_update(s[i], fields[i], scales[i]) for i in range(s.size)])


def recall(T: np.ndarray, probe, max_sweeps: int = 100, order: Optional[Sequence[int]] = None):
    """Sweep until a full pass flips nothing.

    Returns ``(state, sweeps_used, energy_trajectory)`` where the trajectory
    starts with the probe's energy and gains one entry per sweep.
    """
    if max_sweeps < 1:
        raise ParameterError("max_sweeps must be >= 1")
    s = as_bipolar(probe)
    T = _check_weights(T, s.size)
    idx = _check_order(order, s.size)
    trajectory = [energy(T, s)]
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        nxt = update_async(T, s, idx)
        trajectory.append(energy(T, nxt))
        changed = not np.array_equal(nxt, s)
        s = nxt
        if not changed:
            break
    return s, sweeps, trajectory
