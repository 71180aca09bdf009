"""Dimensionality reduction: centered PCA for alert and incident matrices.

Fitting targets either a fixed component count or a variance-capture goal,
whichever binds first. The solver is an exact eigendecomposition of the
covariance matrix for narrow inputs (works directly on sparse matrices
without densifying), falling back to a thin SVD of the centered matrix for
wide ones. Components carry a sign convention so a fixed input always yields
a bit-identical model.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

PCA_FORMAT_MAGIC = b"SDPC"
PCA_FORMAT_VERSION = 1

# Covariance eigendecomposition is exact and cheap up to this width.
_EIG_WIDTH_LIMIT = 2000


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    subject_kind: str  # "alert" | "incident"
    subject_id: str


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray                      # (input_dim,)
    components: np.ndarray                # (k, input_dim), rows orthonormal
    explained_variance_ratio: np.ndarray  # (k,), non-increasing
    version: str = "pca-v1"

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def input_dim(self) -> int:
        return self.components.shape[1]

    def captured_variance(self) -> float:
        return float(self.explained_variance_ratio.sum())


def _column_mean(matrix) -> np.ndarray:
    if sp.issparse(matrix):
        return np.asarray(matrix.mean(axis=0)).ravel()
    return np.asarray(matrix, dtype=np.float64).mean(axis=0)


def _apply_sign_convention(components: np.ndarray) -> np.ndarray:
    out = components.copy()
    for row in out:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    return out


def fit_pca(matrix, k: int = 40, variance_target: float = 0.95, version: str = "pca-v1") -> PcaModel:
    """Fit a centered PCA on an (n, d) dense or sparse matrix.

    The model keeps the smallest component count that captures at least
    `variance_target` of the total variance, capped at `k`. No per-column
    scaling is applied; one-hot count columns stay in their native units.
    """
    n, d = matrix.shape
    if n < 2:
        raise ValueError(f"need at least 2 samples to fit, got {n}")
    k_cap = min(k, n, d)
    if k_cap < 1:
        raise ValueError("component cap must be >= 1")

    mean = _column_mean(matrix)

    if d <= _EIG_WIDTH_LIMIT:
        # Covariance from the Gram matrix; sparse inputs never densify.
        gram = (matrix.T @ matrix)
        if sp.issparse(gram):
            gram = gram.toarray()
        gram = np.asarray(gram, dtype=np.float64)
        cov = (gram - n * np.outer(mean, mean)) / (n - 1)
        total_variance = float(np.trace(cov))
        if total_variance <= 0.0:
            raise ValueError("input has zero variance in every column")
        eigenvalues, eigenvectors = np.linalg.eigh(cov)
        order = np.argsort(eigenvalues)[::-1]
        eigenvalues = np.clip(eigenvalues[order], 0.0, None)
        components = eigenvectors[:, order].T
    else:
        dense = matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix, dtype=np.float64)
        centered = dense - mean
        _, singular, vt = np.linalg.svd(centered, full_matrices=False)
        eigenvalues = (singular ** 2) / (n - 1)
        total_variance = float(eigenvalues.sum())
        if total_variance <= 0.0:
            raise ValueError("input has zero variance in every column")
        components = vt

    ratios = eigenvalues[:k_cap] / total_variance
    cumulative = np.cumsum(ratios)
    reached = np.nonzero(cumulative >= variance_target - 1e-12)[0]
    k_eff = int(reached[0]) + 1 if reached.size else k_cap

    return PcaModel(
        mean=np.asarray(mean, dtype=np.float64),
        components=_apply_sign_convention(np.asarray(components[:k_eff], dtype=np.float64)),
        explained_variance_ratio=np.asarray(ratios[:k_eff], dtype=np.float64),
        version=version,
    )


def transform(model: PcaModel, vector: np.ndarray) -> np.ndarray:
    """Project one d-vector: components @ (vector - mean)."""
    vector = np.asarray(vector, dtype=np.float64).ravel()
    if vector.shape[0] != model.input_dim:
        raise ValueError(f"dimension mismatch: vector has {vector.shape[0]}, model expects {model.input_dim}")
    return model.components @ (vector - model.mean)


def transform_matrix(model: PcaModel, matrix) -> np.ndarray:
    """Project an (n, d) dense or sparse matrix to (n, k) without densifying."""
    if matrix.shape[1] != model.input_dim:
        raise ValueError(f"dimension mismatch: matrix has {matrix.shape[1]}, model expects {model.input_dim}")
    projected = matrix @ model.components.T
    if sp.issparse(projected):
        projected = projected.toarray()
    return np.asarray(projected, dtype=np.float64) - model.mean @ model.components.T


def embed(model: PcaModel, vector: np.ndarray, subject_kind: str, subject_id: str) -> Embedding:
    return Embedding(vector=transform(model, vector), subject_kind=subject_kind, subject_id=subject_id)


def validate_model(model: PcaModel, tolerance: float = 1e-6) -> None:
    """Assert orthonormality and a sane variance accounting; raises on failure."""
    gram = model.components @ model.components.T
    residual = float(np.max(np.abs(gram - np.eye(model.k))))
    if residual >= tolerance:
        raise ValueError(f"components not orthonormal: residual {residual:.3e}")
    ratios = model.explained_variance_ratio
    if np.any(ratios < -1e-12) or np.any(ratios > 1.0 + 1e-9):
        raise ValueError("explained variance ratios outside [0, 1]")
    if np.any(np.diff(ratios) > 1e-12):
        raise ValueError("explained variance ratios must be non-increasing")
    if float(ratios.sum()) > 1.0 + 1e-9:
        raise ValueError("explained variance ratios sum above 1")


def save_pca(model: PcaModel, path: str | Path) -> None:
    """Binary dump: magic, format version, dims, then little-endian float64 blocks.

    Layout after the header: mean (d), components (k*d, row-major), ratios (k).
    Round-trips exactly.
    """
    version_bytes = model.version.encode("utf-8")
    header = struct.pack(
        "<4sHHII", PCA_FORMAT_MAGIC, PCA_FORMAT_VERSION, len(version_bytes),
        model.k, model.input_dim,
    )
    with Path(path).open("wb") as fh:
        fh.write(header)
        fh.write(version_bytes)
        fh.write(np.ascontiguousarray(model.mean, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.components, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.explained_variance_ratio, dtype="<f8").tobytes())


def load_pca(path: str | Path) -> PcaModel:
    raw = Path(path).read_bytes()
    magic, fmt, version_len, k, d = struct.unpack_from("<4sHHII", raw, 0)
    if magic != PCA_FORMAT_MAGIC or fmt != PCA_FORMAT_VERSION:
        raise ValueError(f"not a pca bundle: {path}")
    offset = struct.calcsize("<4sHHII")
    version = raw[offset:offset + version_len].decode("utf-8")
    offset += version_len
    mean = np.frombuffer(raw, dtype="<f8", count=d, offset=offset).copy()
    offset += d * 8
    components = np.frombuffer(raw, dtype="<f8", count=k * d, offset=offset).reshape(k, d).copy()
    offset += k * d * 8
    ratios = np.frombuffer(raw, dtype="<f8", count=k, offset=offset).copy()
    return PcaModel(mean=mean, components=components, explained_variance_ratio=ratios, version=version)
