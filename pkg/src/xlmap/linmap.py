"""Linear maps between embedding spaces.

Vectors are stored as rows throughout the package, so a batch ``X`` of shape
``(p, d)`` is mapped to ``X @ W.T``. A map ``W`` sends a column vector ``x``
to ``W x``.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

COND_LIMIT = 1e12
MAP_MAGIC = b"XLMAP"
MAP_VERSION = 1


class RankDeficientError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True, eq=False)
class MappingMatrix:
    """A square map ``w`` plus the orthogonalization strength ``beta``."""

    w: np.ndarray
    beta: float = 0.01
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"mapping must be square, got shape {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ValueError("mapping has non-finite entries")
        w.flags.writeable = False
        object.__setattr__(self, "w", w)

    @classmethod
    def identity(cls, dim: int, beta: float = 0.01) -> "MappingMatrix":
        return cls(np.eye(dim), beta)

    @property
    def dim(self) -> int:
        return self.w.shape[0]

    def singular_values(self) -> np.ndarray:
        return np.linalg.svd(self.w, compute_uv=False)

    def orthogonality_error(self) -> float:
        """Frobenius norm of ``W W^T - I``."""
        return float(np.linalg.norm(self.w @ self.w.T - np.eye(self.dim)))

    def is_near_orthogonal(self, tol: float = 1e-2) -> bool:
        s = self.singular_values()
        return bool(np.all(np.abs(s - 1.0) <= tol))

    @property
    def fingerprint(self) -> str:
        return hashlib.sha1(np.ascontiguousarray(self.w).tobytes()).hexdigest()

    def with_meta(self, **kw) -> "MappingMatrix":
        return MappingMatrix(self.w, self.beta, {**self.meta, **kw})


def _check_pair(X, Y):
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.ndim != 2 or X.shape != Y.shape:
        raise ValueError(f"expected two (p, d) arrays of equal shape, got {X.shape} and {Y.shape}")
    if X.shape[0] < 1:
        raise ValueError("need at least one aligned pair")
    return X, Y


def frobenius_objective(w, X, Y) -> float:
    """``||W X - Y||_F`` with aligned rows in ``X`` and ``Y``."""
    w = w.w if isinstance(w, MappingMatrix) else np.asarray(w)
    return float(np.linalg.norm(np.asarray(X) @ w.T - np.asarray(Y)))


def least_squares_map(X, Y) -> MappingMatrix:
    """Unconstrained minimizer of ``||W X - Y||_F``.

    Solves the normal equations ``W (X^T X) = Y^T X`` (row layout). Raises
    :class:`RankDeficientError` when the Gram matrix is numerically singular.
    The residual is stored in ``meta['residual']``.
    """
    X, Y = _check_pair(X, Y)
    p, d = X.shape
    if p < d:
        raise RankDeficientError(f"need at least {d} pairs, got {p}")
    gram = X.T @ X
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise RankDeficientError(f"source Gram matrix is ill-conditioned (cond={cond:.3g})")
    w = np.linalg.solve(gram, X.T @ Y).T
    return MappingMatrix(w, meta={"residual": frobenius_objective(w, X, Y), "cond": float(cond)})


def procrustes(X, Y) -> MappingMatrix:
    """Orthogonal ``W`` minimizing ``||W X - Y||_F``.

    ``W = U V^T`` where ``U S V^T`` is the SVD of the cross-covariance
    ``sum_i y_i x_i^T``. A rank-deficient cross-covariance has no unique
    solution; one is still returned with ``meta['rank_deficient']`` set.
    """
    X, Y = _check_pair(X, Y)
    m = Y.T @ X
    u, s, vt = np.linalg.svd(m)
    w = u @ vt
    tol = s.max(initial=0.0) * max(m.shape) * np.finfo(np.float64).eps
    deficient = bool(s.min() <= tol)
    return MappingMatrix(w, meta={"objective": frobenius_objective(w, X, Y),
                                  "rank_deficient": deficient})


def polar_factor(w) -> np.ndarray:
    """Closest orthogonal matrix to ``w`` in Frobenius norm."""
    u, _, vt = np.linalg.svd(np.asarray(w, dtype=np.float64))
    return u @ vt


def orthogonalize_step(m: MappingMatrix) -> MappingMatrix:
    """One step of ``W <- (1 + beta) W - beta (W W^T) W``."""
    return MappingMatrix(orthogonalize_array(m.w, m.beta), m.beta, dict(m.meta))


def orthogonalize_array(w: np.ndarray, beta: float) -> np.ndarray:
    return (1.0 + beta) * w - beta * (w @ w.T) @ w


def apply_map(m: MappingMatrix | np.ndarray, vectors) -> np.ndarray:
    """Map row vectors (or a single vector) through ``W``."""
    w = m.w if isinstance(m, MappingMatrix) else np.asarray(m, dtype=np.float64)
    v = np.asarray(vectors)
    if v.shape[-1] != w.shape[1]:
        raise ValueError(f"vector dimension {v.shape[-1]} does not match map dimension {w.shape[1]}")
    return v @ w.T


def save_mapping(m: MappingMatrix, path) -> None:
    """Text layout: header ``"d beta"`` then ``d`` rows of ``d`` values."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{m.dim} {m.beta!r}\n")
        for row in m.w.tolist():
            fh.write(" ".join(repr(v) for v in row) + "\n")


def load_mapping(path) -> MappingMatrix:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: malformed mapping header")
        d, beta = int(header[0]), float(header[1])
        w = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    if w.shape != (d, d):
        raise ValueError(f"{path}: expected {d}x{d} values, got {w.shape}")
    return MappingMatrix(w, beta)


def save_mapping_binary(m: MappingMatrix, path) -> None:
    """Binary layout: magic, version byte, uint32 d, float64 beta, float64 rows."""
    with open(path, "wb") as fh:
        fh.write(MAP_MAGIC)
        fh.write(struct.pack("<BId", MAP_VERSION, m.dim, m.beta))
        fh.write(np.ascontiguousarray(m.w, dtype="<f8").tobytes())


def load_mapping_binary(path) -> MappingMatrix:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:len(MAP_MAGIC)] != MAP_MAGIC:
        raise ValueError(f"{path}: not a mapping file")
    version, d, beta = struct.unpack_from("<BId", data, len(MAP_MAGIC))
    if version != MAP_VERSION:
        raise ValueError(f"{path}: unsupported mapping version {version}")
    off = len(MAP_MAGIC) + struct.calcsize("<BId")
    w = np.frombuffer(data, dtype="<f8", count=d * d, offset=off).reshape(d, d)
    return MappingMatrix(w.astype(np.float64), beta)
