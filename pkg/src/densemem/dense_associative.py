"""Dense associative memories with polynomial or exponential interactions.

The energy is ``E = -Σ_μ F(ξ^μ·σ)`` with ``F(x) = xⁿ`` or ``F(x) = eˣ``.
A spin is updated by comparing the two energies it could produce: the
local "field" for spin ``i`` is

    Σ_μ [F(ξ_i^μ + r_μ) - F(-ξ_i^μ + r_μ)],   r_μ = Σ_{j≠i} ξ_j^μ σ_j

and ``σ_i`` takes its sign (ties keep the current spin). Because the field
is exactly ``E(σ_i=-1) - E(σ_i=+1)``, no update ever raises the energy.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, TextIO

import numpy as np

from .classical_hopfield import TIE_RTOL, PatternStore, _check_order, as_bipolar
from .errors import DimensionError, FormatError, NumericError, ParameterError
from .numerics import make_rng

CAPACITY_HEADER = ["interaction", "N", "K", "corruption", "trials", "recovery_rate"]


@dataclass(frozen=True)
class Interaction:
    """``kind`` is ``"poly"`` (with degree ``n >= 2``) or ``"exp"``."""

    kind: str
    n: Optional[int] = None

    def __post_init__(self):
        if self.kind == "poly":
            if self.n is None or int(self.n) != self.n or self.n < 2:
                raise ParameterError(f"polynomial interaction needs integer n >= 2, got {self.n}")
        elif self.kind == "exp":
            if self.n is not None:
                raise ParameterError("exponential interaction takes no degree")
        else:
            raise ParameterError(f"unknown interaction kind {self.kind!r}")

    @classmethod
    def parse(cls, name: str) -> "Interaction":
        """``"poly3"`` -> polynomial degree 3; ``"exp"`` -> exponential."""
        name = name.strip().lower()
        if name in ("exp", "exponential"):
            return cls("exp")
        m = re.fullmatch(r"poly(\d+)", name)
        if not m:
            raise ParameterError(f"unknown interaction {name!r} (use polyN or exp)")
        return cls("poly", int(m.group(1)))

    @property
    def name(self) -> str:
        return "exp" if self.kind == "exp" else f"poly{self.n}"


@dataclass(frozen=True)
class DamConfig:
    interaction: Interaction
    patterns: PatternStore

    def __post_init__(self):
        if not isinstance(self.patterns, PatternStore):
            object.__setattr__(self, "patterns", PatternStore(self.patterns))
        if isinstance(self.interaction, str):
            object.__setattr__(self, "interaction", Interaction.parse(self.interaction))


def energy_dam(cfg: DamConfig, state) -> float:
    xi = cfg.patterns.patterns
    s = as_bipolar(state)
    if s.size != xi.shape[1]:
        raise DimensionError(f"state has length {s.size}, patterns have width {xi.shape[1]}")
    overlaps = xi @ s
    if cfg.interaction.kind == "poly":
        return float(-np.sum(overlaps ** cfg.interaction.n))
    top = overlaps.max()
    with np.errstate(over="ignore"):
        val = -np.exp(top) * np.sum(np.exp(overlaps - top))
    if not np.isfinite(val):
        raise NumericError(f"exponential energy overflows float64 (max overlap {top:g})")
    return float(val)


def _fields(kind: str, n: Optional[int], xi_i: np.ndarray, rest: np.ndarray):
    """Local fields and their magnitude scale, reducing over the last axis.

    ``xi_i`` and ``rest`` are ``(..., K)``: the pattern bit at the updated
    site and the overlap excluding that site.
    """
    up = rest + xi_i
    down = rest - xi_i
    if kind == "poly":
        fu, fd = up**n, down**n
    else:
        shift = np.maximum(up.max(axis=-1, keepdims=True), down.max(axis=-1, keepdims=True))
        fu, fd = np.exp(up - shift), np.exp(down - shift)
    field = np.sum(fu - fd, axis=-1)
    scale = np.sum(np.abs(fu) + np.abs(fd), axis=-1)
    return field, scale


def _sweep(kind: str, n: Optional[int], xi: np.ndarray, states: np.ndarray, order: np.ndarray) -> np.ndarray:
    """One asynchronous sweep over a batch: ``xi`` (B, K, N), ``states`` (B, N)."""
    s = states.copy()
    overlaps = np.einsum("bkn,bn->bk", xi, s)
    for i in order:
        col = xi[:, :, i]
        old = s[:, i].copy()
        rest = overlaps - col * old[:, None]
        field, scale = _fields(kind, n, col, rest)
        new = np.where(field > 0, 1.0, -1.0)
        new = np.where(np.abs(field) <= TIE_RTOL * scale, old, new)
        s[:, i] = new
        overlaps = rest + col * new[:, None]
    return s


def update_dam(cfg: DamConfig, state, order: Optional[Sequence[int]] = None) -> np.ndarray:
    """One asynchronous sweep of the energy-difference sign rule."""
    xi = cfg.patterns.patterns
    s = as_bipolar(state, xi.shape[1])
    idx = _check_order(order, s.size)
    inter = cfg.interaction
    return _sweep(inter.kind, inter.n, xi[None], s[None], idx)[0]


def update_site_dam(cfg: DamConfig, state, i: int) -> np.ndarray:
    """Apply the rule to spin ``i`` alone."""
    xi = cfg.patterns.patterns
    s = as_bipolar(state, xi.shape[1])
    if not 0 <= i < s.size:
        raise ParameterError(f"site {i} out of range for N={s.size}")
    inter = cfg.interaction
    return _sweep(inter.kind, inter.n, xi[None], s[None], np.array([i]))[0]


def recall_dam(cfg: DamConfig, probe, max_sweeps: int = 100, order: Optional[Sequence[int]] = None):
    """Sweep to a fixed point; returns ``(state, sweeps_used, energy_trajectory)``."""
    if max_sweeps < 1:
        raise ParameterError("max_sweeps must be >= 1")
    s = as_bipolar(probe, cfg.patterns.N)
    idx = _check_order(order, s.size)
    trajectory = [energy_dam(cfg, s)]
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        nxt = update_dam(cfg, s, idx)
        trajectory.append(energy_dam(cfg, nxt))
        changed = not np.array_equal(nxt, s)
        s = nxt
        if not changed:
            break
    return s, sweeps, trajectory


# --------------------------------------------------------------------------
# Capacity experiment
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CapacityRow:
    interaction: str
    N: int
    K: int
    corruption: float
    trials: int
    recovery_rate: float


def _corrupt(pattern: np.ndarray, n_flip: int, rng: np.random.Generator) -> np.ndarray:
    probe = pattern.copy()
    if n_flip:
        probe[rng.choice(pattern.size, size=n_flip, replace=False)] *= -1
    return probe


def capacity_experiment(
    interaction,
    N: int,
    K_grid: Iterable[int],
    corruption: float,
    trials: int,
    seed: int,
    max_sweeps: int = 50,
) -> List[CapacityRow]:
    """Exact-recovery rate from corrupted probes for each K in ``K_grid``.

    Trial ``t`` at load ``K`` draws its patterns and corruption from the
    stream ``(seed, "capacity", K, t)``, so each row is reproducible on its
    own and rows do not depend on which other K values were requested.
    Pattern 0 is the recall target; the probe has ``round(corruption·N)``
    flipped bits.
    """
    inter = interaction if isinstance(interaction, Interaction) else Interaction.parse(interaction)
    if not 1 <= N <= 256:
        raise ParameterError(f"N must lie in [1, 256], got {N}")
    if trials < 50:
        raise ParameterError(f"trials must be >= 50, got {trials}")
    if not 0.0 <= corruption <= 1.0:
        raise ParameterError(f"corruption must lie in [0, 1], got {corruption}")
    grid = [int(k) for k in K_grid]
    if not grid or min(grid) < 1:
        raise ParameterError("K grid must be non-empty with K >= 1")
    n_flip = int(round(corruption * N))
    order = np.arange(N)
    rows = []
    for K in grid:
        xi = np.empty((trials, K, N))
        probes = np.empty((trials, N))
        for t in range(trials):
            rng = make_rng(seed, "capacity", K, t)
            xi[t] = rng.choice(np.array([-1.0, 1.0]), size=(K, N))
            probes[t] = _corrupt(xi[t, 0], n_flip, rng)
        states = probes
        for _ in range(max_sweeps):
            nxt = _sweep(inter.kind, inter.n, xi, states, order)
            if np.array_equal(nxt, states):
                break
            states = nxt
        recovered = np.all(states == xi[:, 0, :], axis=1)
        rows.append(CapacityRow(inter.name, N, K, float(corruption), trials, float(recovered.mean())))
    return rows


def capacity_threshold(rows: Sequence[CapacityRow], threshold: float = 0.9) -> int:
    """Largest K reached before the rate first drops below ``threshold``.

    Rows are scanned in increasing K; 0 means even the smallest K failed.
    """
    best = 0
    for row in sorted(rows, key=lambda r: r.K):
        if row.recovery_rate < threshold:
            break
        best = row.K
    return best


def write_capacity_csv(rows: Sequence[CapacityRow], fh: TextIO) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CAPACITY_HEADER)
    for r in rows:
        w.writerow([r.interaction, r.N, r.K, repr(r.corruption), r.trials, repr(r.recovery_rate)])


def read_capacity_csv(fh: TextIO) -> List[CapacityRow]:
    reader = csv.DictReader(fh)
    if reader.fieldnames != CAPACITY_HEADER:
        raise FormatError(f"unexpected capacity CSV header {reader.fieldnames}")
    return [
        CapacityRow(
            r["interaction"], int(r["N"]), int(r["K"]), float(r["corruption"]),
            int(r["trials"]), float(r["recovery_rate"]),
        )
        for r in reader
    ]
