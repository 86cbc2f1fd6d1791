"""Static-memory attention with learnable slots and tied projections.

Memory is an m×d matrix ``xi`` of learnable slots and a single d×d matrix
``W_k``. Keys and values are both projected from the same slots:

    K = xi · W_kᵀ        V = xi · W_k

i.e. the value projection is the transpose of the key projection, so it
is never stored separately. For a batch of query rows ``Q`` (T×d)

    z = softmax(Q·Kᵀ / √d) · V

gives one convex combination of the ``m`` value rows per query. Nothing
in K or V depends on the input; only the queries do.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from typing import BinaryIO, Optional, Union

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage

from . import numerics as nx
from .errors import DimensionError, FormatError, ParameterError
from .numerics import Tensor, make_rng

MAGIC = b"DAMW"
MEMORY_VERSION = 1


@dataclass
class StaticMemory:
    xi: Tensor
    W_k: Tensor

    def __post_init__(self):
        self.xi = nx.as_tensor(self.xi, requires_grad=True)
        self.W_k = nx.as_tensor(self.W_k, requires_grad=True)
        if self.xi.ndim != 2:
            raise DimensionError(f"xi must be m×d, got {self.xi.shape}")
        d = self.xi.shape[1]
        if self.W_k.shape != (d, d):
            raise DimensionError(f"W_k must be {d}×{d}, got {self.W_k.shape}")

    @property
    def m(self) -> int:
        return self.xi.shape[0]

    @property
    def d(self) -> int:
        return self.xi.shape[1]

    def keys(self) -> Tensor:
        return nx.matmul(self.xi, nx.transpose(self.W_k))

    def values(self) -> Tensor:
        return nx.matmul(self.xi, self.W_k)

    def parameters(self) -> dict:
        return {"xi": self.xi, "W_k": self.W_k}


def _attention(mem: StaticMemory, Q: Tensor):
    if Q.ndim != 2 or Q.shape[1] != mem.d:
        raise DimensionError(f"queries must be T×{mem.d}, got {Q.shape}")
    K = mem.keys()
    V = mem.values()
    logits = nx.scale(nx.matmul(Q, nx.transpose(K)), 1.0 / math.sqrt(K.shape[1]))
    return nx.softmax_rows(logits), K, V


def dam_forward(mem: StaticMemory, Q, trace: Optional[dict] = None) -> Tensor:
    """Retrieve one value mixture per query row; differentiable in Q, xi, W_k.

    If ``trace`` is given, the keys and values used by this call are stored
    in it under ``"K"`` and ``"V"`` as plain arrays.
    """
    Q = nx.as_tensor(Q)
    weights, K, V = _attention(mem, Q)
    if trace is not None:
        trace["K"] = K.data.copy()
        trace["V"] = V.data.copy()
    return nx.matmul(weights, V)


def attention_weights(mem: StaticMemory, Q) -> np.ndarray:
    weights, _, _ = _attention(mem, nx.as_tensor(Q))
    return weights.data


@dataclass(frozen=True)
class RetrievalDiagnostics:
    attention_entropy: np.ndarray
    effective_states: int


def count_clusters(rows: np.ndarray, tol: float) -> int:
    """Complete-linkage clusters of ``rows`` cut at distance ``tol``."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[0] <= 1:
        return rows.shape[0]
    labels = fcluster(linkage(rows, method="complete"), t=tol, criterion="distance")
    return int(np.unique(labels).size)


def dam_diagnostics(mem: StaticMemory, Q) -> RetrievalDiagnostics:
    """Per-query attention entropy and the number of distinct value clusters."""
    w = attention_weights(mem, Q)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(w > 0, w * np.log(w), 0.0)
    entropy = np.clip(-terms.sum(axis=1), 0.0, math.log(mem.m))
    V = mem.values().data
    tol = 1e-3 * float(np.mean(np.linalg.norm(V, axis=1)))
    return RetrievalDiagnostics(entropy, count_clusters(V, tol))


def init_static_memory(m: int = 8, d: int = 64, seed: int = 0, scheme: str = "default") -> StaticMemory:
    """Fresh memory parameters.

    ``default``: slots ~ N(0, 1/d) (row norms near 1) and
    ``W_k = I + 0.01·N(0, 1/d)``. ``identity_Wk``: same slots, ``W_k = I``.
    """
    if m < 1 or d < 1:
        raise ParameterError(f"need m >= 1 and d >= 1, got m={m}, d={d}")
    rng = make_rng(seed, "static_memory")
    xi = rng.standard_normal((m, d)) / math.sqrt(d)
    noise = rng.standard_normal((d, d)) / math.sqrt(d)
    if scheme == "default":
        W_k = np.eye(d) + 0.01 * noise
    elif scheme == "identity_Wk":
        W_k = np.eye(d)
    else:
        raise ParameterError(f"unknown init scheme {scheme!r}")
    return StaticMemory(Tensor(xi, requires_grad=True), Tensor(W_k, requires_grad=True))


# --------------------------------------------------------------------------
# Binary persistence
# --------------------------------------------------------------------------


def encode_memory_body(mem: StaticMemory) -> bytes:
    """``(m, d)`` as u32 LE, then xi rows, then W_k rows, float64 LE row-major."""
    return (
        struct.pack("<II", mem.m, mem.d)
        + mem.xi.data.astype("<f8").tobytes(order="C")
        + mem.W_k.data.astype("<f8").tobytes(order="C")
    )


def decode_memory_body(buf: bytes) -> StaticMemory:
    if len(buf) < 8:
        raise FormatError("truncated memory header")
    m, d = struct.unpack_from("<II", buf, 0)
    need = 8 + 8 * (m * d + d * d)
    if len(buf) != need:
        raise FormatError(f"memory body has {len(buf)} bytes, expected {need} for m={m}, d={d}")
    xi = np.frombuffer(buf, dtype="<f8", count=m * d, offset=8).reshape(m, d)
    W_k = np.frombuffer(buf, dtype="<f8", count=d * d, offset=8 + 8 * m * d).reshape(d, d)
    return StaticMemory(Tensor(xi.astype(np.float64), requires_grad=True), Tensor(W_k.astype(np.float64), requires_grad=True))


def read_header(fh: BinaryIO, expected_version: int) -> None:
    head = fh.read(6)
    if len(head) < 6 or head[:4] != MAGIC:
        raise FormatError(f"bad magic {head[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<H", head[4:6])
    if version != expected_version:
        raise FormatError(f"unsupported version {version}, expected {expected_version}")


def save_static_memory(mem: StaticMemory, target: Union[str, BinaryIO]) -> None:
    payload = MAGIC + struct.pack("<H", MEMORY_VERSION) + encode_memory_body(mem)
    if isinstance(target, (str, bytes)) or hasattr(target, "__fspath__"):
        with open(target, "wb") as fh:
            fh.write(payload)
    else:
        target.write(payload)


def load_static_memory(source: Union[str, BinaryIO]) -> StaticMemory:
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, "rb") as fh:
            data = fh.read()
    else:
        data = source.read()
    fh = io.BytesIO(data)
    read_header(fh, MEMORY_VERSION)
    return decode_memory_body(fh.read())
