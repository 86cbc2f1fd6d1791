"""Continuous modern Hopfield memory and its attention-style retrieval.

Stored patterns are the columns of ``X`` (d×N). The energy of a query
state ``ξ`` is

    E(ξ) = -lse(β, Xᵀξ) + ½ξᵀξ + β⁻¹ log N + ½M²,   M = max column norm

and one retrieval step is ``ξ ← X softmax(β Xᵀξ)``, which never raises E.
The same step is also expressible as a Universal Hopfield composition
``P · sep(sim(M, q))``; :func:`uhn_retrieve` implements that generic form
with a small registry of similarity and separation functions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, TextIO, Tuple

import numpy as np

from . import numerics as nx
from .errors import DimensionError, FormatError, ParameterError
from .numerics import Tensor, softmax_array

CENSUS_HEADER = ["attractor_id", "basin_count", "norm"]


@dataclass(frozen=True)
class ContinuousStore:
    X: np.ndarray
    beta: Optional[float] = None

    def __post_init__(self):
        X = np.array(self.X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[1] < 1:
            raise ParameterError(f"store needs a d×N matrix with N >= 1, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ParameterError("stored patterns must be finite")
        X.setflags(write=False)
        object.__setattr__(self, "X", X)
        beta = 1.0 / math.sqrt(X.shape[0]) if self.beta is None else float(self.beta)
        if not beta > 0:
            raise ParameterError(f"beta must be > 0, got {beta}")
        object.__setattr__(self, "beta", beta)

    @property
    def d(self) -> int:
        return self.X.shape[0]

    @property
    def N(self) -> int:
        return self.X.shape[1]


def _query(store: ContinuousStore, xi) -> np.ndarray:
    q = np.asarray(xi, dtype=np.float64).ravel()
    if q.size != store.d:
        raise DimensionError(f"query has length {q.size}, store has width {store.d}")
    return q


def energy_continuous(store: ContinuousStore, xi):
    """Energy of query ``xi``.

    An array query gives a float; a :class:`Tensor` query gives a scalar
    tensor differentiable with respect to the query.
    """
    X, beta = store.X, store.beta
    half_m2 = 0.5 * float(np.max(np.sum(X * X, axis=0)))
    const = math.log(store.N) / beta + half_m2
    if isinstance(xi, Tensor):
        if xi.shape != (store.d,):
            raise DimensionError(f"query has shape {xi.shape}, store has width {store.d}")
        sims = nx.reshape(nx.matmul(Tensor(X.T), nx.reshape(xi, (store.d, 1))), (store.N,))
        quad = nx.scale(nx.sum(nx.mul(xi, xi)), 0.5)
        return nx.add(nx.sub(quad, nx.logsumexp(beta, sims)), Tensor(np.asarray(const)))
    q = _query(store, xi)
    return -nx.logsumexp(beta, X.T @ q) + 0.5 * float(q @ q) + const


def retrieval_weights(store: ContinuousStore, xi) -> np.ndarray:
    """Softmax weights over stored columns (the convex-combination certificate)."""
    q = _query(store, xi)
    return softmax_array(store.beta * (store.X.T @ q))


def update_continuous(store: ContinuousStore, xi) -> np.ndarray:
    q = _query(store, xi)
    return store.X @ softmax_array(store.beta * (store.X.T @ q))


def iterate_continuous(store: ContinuousStore, xi, iters: int) -> np.ndarray:
    q = _query(store, xi)
    for _ in range(iters):
        q = update_continuous(store, q)
    return q


def retrieve_static_query(xi_fixed, K: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """``softmax(ξᵀKᵀ/√d_k)·Z`` for a fixed query ``ξ``; keys and values are rows."""
    K = np.asarray(K, dtype=np.float64)
    Z = np.asarray(Z, dtype=np.float64)
    q = np.asarray(xi_fixed, dtype=np.float64).ravel()
    if K.ndim != 2 or Z.ndim != 2 or K.shape[0] != Z.shape[0] or K.shape[1] != q.size:
        raise DimensionError(f"query {q.shape}, keys {K.shape}, values {Z.shape} are inconsistent")
    beta = 1.0 / math.sqrt(K.shape[1])
    # same kernels as uhn_retrieve(dot, softmax(beta), P=Zᵀ) with M = Kᵀ
    return Z.T @ softmax_array(beta * (K @ q))


# --------------------------------------------------------------------------
# Universal Hopfield composition
# --------------------------------------------------------------------------


def _sim_dot(M: np.ndarray, q: np.ndarray) -> np.ndarray:
    return M.T @ q


def _sim_cosine(M: np.ndarray, q: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(M, axis=0) * np.linalg.norm(q)
    if np.any(norms == 0):
        raise ParameterError("cosine similarity is undefined for zero vectors")
    return (M.T @ q) / norms


def _sep_softmax(s: np.ndarray, beta: float) -> np.ndarray:
    return softmax_array(beta * s)


def _sep_max(s: np.ndarray, beta: float) -> np.ndarray:
    out = np.zeros_like(s)
    out[int(np.argmax(s))] = 1.0
    return out


SIMILARITIES: Dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    "dot": _sim_dot,
    "cosine": _sim_cosine,
}
SEPARATIONS: Dict[str, Callable[[np.ndarray, float], np.ndarray]] = {
    "softmax": _sep_softmax,
    "max": _sep_max,
}


@dataclass(frozen=True)
class UhnSpec:
    """Named similarity/separation plus the projection matrix ``P``."""

    sim: str
    sep: str
    P: np.ndarray
    beta: float = 1.0

    def __post_init__(self):
        if self.sim not in SIMILARITIES:
            raise ParameterError(f"unknown similarity {self.sim!r}; known: {sorted(SIMILARITIES)}")
        if self.sep not in SEPARATIONS:
            raise ParameterError(f"unknown separation {self.sep!r}; known: {sorted(SEPARATIONS)}")
        if not self.beta > 0:
            raise ParameterError(f"beta must be > 0, got {self.beta}")
        object.__setattr__(self, "P", np.asarray(self.P, dtype=np.float64))


def uhn_retrieve(spec: UhnSpec, M: np.ndarray, q) -> np.ndarray:
    """``P · sep(sim(M, q))`` with stored patterns as the columns of ``M``."""
    M = np.asarray(M, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64).ravel()
    if M.ndim != 2 or M.shape[0] != q.size:
        raise DimensionError(f"memory {M.shape} does not match query length {q.size}")
    if spec.P.ndim != 2 or spec.P.shape[1] != M.shape[1]:
        raise DimensionError(f"projection {spec.P.shape} does not match {M.shape[1]} stored patterns")
    weights = SEPARATIONS[spec.sep](SIMILARITIES[spec.sim](M, q), spec.beta)
    return spec.P @ weights


# --------------------------------------------------------------------------
# Attractor census
# --------------------------------------------------------------------------


def default_merge_tol(store: ContinuousStore) -> float:
    return 1e-4 * float(np.mean(np.linalg.norm(store.X, axis=0)))


def metastable_census(
    store: ContinuousStore,
    probes: Iterable,
    iters: int = 50,
    merge_tol: Optional[float] = None,
) -> List[Tuple[np.ndarray, int]]:
    """Run every probe to its end state and group end states within ``merge_tol``.

    Each end state joins the first existing group whose representative is
    within ``merge_tol`` (Euclidean); groups are reported sorted
    lexicographically by representative so the order is reproducible.
    """
    if iters < 1:
        raise ParameterError("iters must be >= 1")
    tol = default_merge_tol(store) if merge_tol is None else float(merge_tol)
    if tol < 0:
        raise ParameterError("merge_tol must be >= 0")
    reps: List[np.ndarray] = []
    counts: List[int] = []
    for p in probes:
        end = iterate_continuous(store, p, iters)
        for j, r in enumerate(reps):
            if np.linalg.norm(end - r) <= tol:
                counts[j] += 1
                break
        else:
            reps.append(end)
            counts.append(1)
    order = sorted(range(len(reps)), key=lambda j: tuple(reps[j]))
    return [(reps[j], counts[j]) for j in order]


def write_census_csv(census: List[Tuple[np.ndarray, int]], fh: TextIO) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CENSUS_HEADER)
    for i, (att, count) in enumerate(census):
        w.writerow([i, count, repr(float(np.linalg.norm(att)))])


def read_census_csv(fh: TextIO) -> List[Tuple[int, int, float]]:
    reader = csv.DictReader(fh)
    if reader.fieldnames != CENSUS_HEADER:
        raise FormatError(f"unexpected census CSV header {reader.fieldnames}")
    return [(int(r["attractor_id"]), int(r["basin_count"]), float(r["norm"])) for r in reader]


def well_separated_store(n_patterns: int = 3, d: int = 8, beta: float = 32.0) -> ContinuousStore:
    """Unit-norm, mutually orthogonal patterns (scaled basis vectors)."""
    if not 1 <= n_patterns <= d:
        raise ParameterError("need 1 <= n_patterns <= d for orthogonal patterns")
    return ContinuousStore(np.eye(d)[:, :n_patterns], beta)


def noisy_probes(store: ContinuousStore, per_pattern: int, noise: float, rng: np.random.Generator) -> List[np.ndarray]:
    """Gaussian perturbations around each stored column."""
    out = []
    for j in range(store.N):
        for _ in range(per_pattern):
            out.append(store.X[:, j] + noise * rng.standard_normal(store.d))
    return out
