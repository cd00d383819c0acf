"""Fixed-length feature vectors by kernel PCA over impression similarities.

The kernel maps a similarity ``s`` to ``exp(-(1 - s)^2 / (2 sigma2))``. Training
double-centres the kernel matrix and keeps the leading eigenvectors of the
feature-space covariance ``Kc / N``, scaled so that projected training
samples have unit variance per component (a whitening projection). Queries are centred with the training column and grand means.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .descriptor import SimilarityMatrix
from .errors import DimensionError, DomainError, ParseError, ValidationError

FORMAT_HEADER = "KPCA v1"
# eigenpairs below this fraction of the largest eigenvalue are dropped
RELATIVE_EIGEN_FLOOR = 1e-10


@dataclass(frozen=True)
class KernelParams:
    sigma2: float = 0.5
    d: int | None = None  # None -> min(100, N_l - 1)

    def __post_init__(self):
        if not (self.sigma2 > 0 and math.isfinite(self.sigma2)):
            raise DomainError(f"sigma2 must be a positive finite number, got {self.sigma2!r}")
        if self.d is not None and self.d < 1:
            raise DomainError(f"d must be >= 1, got {self.d}")

    def output_dim(self, n_train: int) -> int:
        d = self.d if self.d is not None else min(100, n_train - 1)
        return max(0, min(d, n_train))


def kernel_value(s, params: KernelParams):
    """Elementwise kernel of a similarity (scalar or array) in ``[0, 1]``."""
    arr = np.asarray(s, dtype=float)
    if np.any(~np.isfinite(arr)) or np.any((arr < 0.0) | (arr > 1.0)):
        raise DomainError(f"similarity outside [0, 1]: {s!r}")
    out = np.exp(-((1.0 - arr) ** 2) / (2.0 * params.sigma2))
    return float(out) if out.ndim == 0 else out


def build_kernel_matrix(sim: SimilarityMatrix, params: KernelParams) -> np.ndarray:
    return kernel_value(sim.scores, params)


@dataclass(frozen=True, eq=False)
class TrainedProjection:
    training_labels: tuple[str, ...]
    projection: np.ndarray  # (N_l, d)
    col_means: np.ndarray  # (N_l,) column means of the training kernel
    grand_mean: float
    eigenvalues: np.ndarray  # (d,) of Kc / N, descending
    sigma2: float
    requested_d: int
    shrunk: bool = False  # True when fewer than requested_d components were valid

    @property
    def n_train(self) -> int:
        return len(self.training_labels)

    @property
    def d(self) -> int:
        return self.projection.shape[1]

    @property
    def kernel_params(self) -> KernelParams:
        return KernelParams(self.sigma2, self.requested_d or None)


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    subject_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise DimensionError("feature vector must be 1-D")
        if not np.all(np.isfinite(v)):
            raise DomainError("feature vector has non-finite entries")
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)


def center_kernel(kernel: np.ndarray) -> np.ndarray:
    col = kernel.mean(axis=0)
    row = kernel.mean(axis=1)
    return kernel - col[None, :] - row[:, None] + kernel.mean()


def fit(kernel: np.ndarray, params: KernelParams, labels: Sequence[str] | None = None) -> TrainedProjection:
    kernel = np.asarray(kernel, dtype=float)
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise ValidationError(f"kernel must be square, got shape {kernel.shape}")
    n = kernel.shape[0]
    if not np.all(np.isfinite(kernel)):
        raise ValidationError("kernel has non-finite entries")
    if not np.allclose(kernel, kernel.T, rtol=0.0, atol=1e-9):
        i, j = np.unravel_index(np.argmax(np.abs(kernel - kernel.T)), kernel.shape)
        raise ValidationError(f"kernel is not symmetric at ({i + 1},{j + 1})")
    labels = tuple(labels) if labels is not None else tuple(str(i) for i in range(n))
    if len(labels) != n:
        raise DimensionError(f"{len(labels)} labels for {n} training samples")
    requested = params.output_dim(n)

    cov = center_kernel(kernel) / n
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1]
    evals, evecs = evals[order], evecs[:, order]

    # the absolute floor catches kernels whose centred form is pure round-off
    lam_max = max(float(evals[0]), 0.0) if n else 0.0
    abs_floor = n * np.finfo(float).eps * max(1.0, float(np.abs(kernel).max(initial=0.0)))
    keep = np.flatnonzero(evals > max(RELATIVE_EIGEN_FLOOR * lam_max, abs_floor))[:requested]
    evals, evecs = evals[keep], evecs[:, keep]
    # fix each eigenvector's sign so the largest-magnitude entry is positive
    if evecs.size:
        pivot = np.argmax(np.abs(evecs), axis=0)
        signs = np.sign(evecs[pivot, np.arange(evecs.shape[1])])
        evecs = evecs * signs
    shrunk = len(keep) < requested
    if shrunk:
        warnings.warn(
            f"kernel rank supports only {len(keep)} of {requested} requested components",
            RuntimeWarning,
            stacklevel=2,
        )
    return TrainedProjection(
        training_labels=labels,
        projection=_whitening(evecs, evals, n),
        col_means=np.ascontiguousarray(kernel.mean(axis=0)),
        grand_mean=float(kernel.mean()),
        eigenvalues=np.ascontiguousarray(evals),
        sigma2=params.sigma2,
        requested_d=requested,
        shrunk=shrunk,
    )


def _whitening(evecs: np.ndarray, evals: np.ndarray, n: int) -> np.ndarray:
    """Scale unit eigenvectors so projected training components have unit variance.

    With ``Kc a = n lam a`` the training projections along ``a`` are
    ``n lam a``, whose population variance is ``n lam``; dividing the
    projection by ``sqrt(n) lam`` brings that to one.
    """
    if not evals.size:
        return np.zeros((n, 0))
    # C order so a reloaded model multiplies through the same BLAS path
    return np.ascontiguousarray(evecs / (math.sqrt(n) * evals))


def center_query(kvec: np.ndarray, trained: TrainedProjection) -> np.ndarray:
    return kvec - trained.col_means - kvec.mean() + trained.grand_mean


def project_kernel_vector(kvec, trained: TrainedProjection) -> np.ndarray:
    kvec = np.asarray(kvec, dtype=float)
    if kvec.shape != (trained.n_train,):
        raise DimensionError(f"expected {trained.n_train} kernel values, got shape {kvec.shape}")
    return center_query(kvec, trained) @ trained.projection


def project_query(query_sims, trained: TrainedProjection, params: KernelParams | None = None,
                  subject_id: str = "") -> FeatureVector:
    """Feature vector of a query given its similarities to every training sample."""
    sims = np.asarray(query_sims, dtype=float)
    if sims.shape != (trained.n_train,):
        raise DimensionError(f"expected {trained.n_train} similarities, got shape {sims.shape}")
    params = params or trained.kernel_params
    return FeatureVector(project_kernel_vector(kernel_value(sims, params), trained), subject_id)


def project_training(kernel: np.ndarray, trained: TrainedProjection) -> np.ndarray:
    """Project each training row the same way a query would be projected."""
    return np.vstack([project_kernel_vector(row, trained) for row in np.asarray(kernel)])


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dumps_projection(trained: TrainedProjection) -> str:
    bad = [lab for lab in trained.training_labels if "," in lab or "\n" in lab]
    if bad:
        raise ValidationError(f"training label {bad[0]!r} cannot be stored (contains ',' or a line break)")
    lines = [
        FORMAT_HEADER,
        f"n_train={trained.n_train}",
        f"d={trained.d}",
        f"requested_d={trained.requested_d}",
        f"sigma2={_fmt(trained.sigma2)}",
        f"shrunk={int(trained.shrunk)}",
        "labels=" + ",".join(trained.training_labels),
        "col_means=" + ",".join(_fmt(v) for v in trained.col_means),
        f"grand_mean={_fmt(trained.grand_mean)}",
        "eigenvalues=" + ",".join(_fmt(v) for v in trained.eigenvalues),
    ]
    lines.extend(",".join(_fmt(v) for v in row) for row in trained.projection)
    return "\n".join(lines) + "\n"


def loads_projection(text: str) -> TrainedProjection:
    lines = text.splitlines()
    if not lines or lines[0].strip() != FORMAT_HEADER:
        raise ParseError(f"missing '{FORMAT_HEADER}' header", 1)
    fields = {}
    idx = 1
    keys = ("n_train", "d", "requested_d", "sigma2", "shrunk", "labels", "col_means",
            "grand_mean", "eigenvalues")
    for key in keys:
        if idx >= len(lines) or not lines[idx].startswith(key + "="):
            raise ParseError(f"expected '{key}='", idx + 1)
        fields[key] = lines[idx][len(key) + 1:]
        idx += 1

    def floats(s):
        return np.array([float(v) for v in s.split(",")]) if s else np.zeros(0)

    try:
        n = int(fields["n_train"])
        d = int(fields["d"])
        labels = tuple(fields["labels"].split(",")) if n else ()
        rows = [floats(line) if d else np.zeros(0) for line in lines[idx:idx + n]]
        if len(rows) != n or any(len(r) != d for r in rows):
            raise ParseError(f"expected {n} projection rows of width {d}", idx + 1)
        trained = TrainedProjection(
            training_labels=labels,
            projection=np.vstack(rows).reshape(n, d) if n else np.zeros((0, d)),
            col_means=floats(fields["col_means"]),
            grand_mean=float(fields["grand_mean"]),
            eigenvalues=floats(fields["eigenvalues"]),
            sigma2=float(fields["sigma2"]),
            requested_d=int(fields["requested_d"]),
            shrunk=bool(int(fields["shrunk"])),
        )
    except ValueError as exc:
        raise ParseError(f"bad number: {exc}") from None
    if len(trained.col_means) != n or len(trained.eigenvalues) != d:
        raise ParseError("centering statistics do not match n_train / d")
    return trained
