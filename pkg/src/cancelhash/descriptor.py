"""Minutiae input, cylinder-lite local descriptors and impression similarity.

Each minutia gets a small 3D grid (x, y, direction) expressed in its own
aligned frame: neighbours within ``radius`` are translated to the reference
minutia, rotated by minus its orientation, and spread over the cells with a
spatial and an angular Gaussian. Two impressions are compared by
correlating every pair of cylinders and averaging the best few.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DimensionError, EmptyInputError, ParseError, ValidationError

TWO_PI = 2.0 * math.pi

# Upper bound on the number of cylinder pairs averaged per impression pair.
MAX_CONSOLIDATED_PAIRS = 12


def normalize_angle(theta: float) -> float:
    t = math.fmod(theta, TWO_PI)
    if t < 0.0:
        t += TWO_PI
    # fmod of a tiny negative value can round up to exactly 2*pi
    if t >= TWO_PI:
        t = 0.0
    return t


@dataclass(frozen=True)
class Minutia:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.theta)):
            raise ValidationError(f"non-finite minutia {self.x!r} {self.y!r} {self.theta!r}")
        object.__setattr__(self, "theta", normalize_angle(self.theta))


@dataclass(frozen=True)
class MinutiaeSet:
    minutiae: tuple[Minutia, ...]
    source_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "minutiae", tuple(self.minutiae))
        if not self.minutiae:
            raise EmptyInputError("a minutiae set needs at least one minutia")
        if len(set(self.minutiae)) != len(self.minutiae):
            raise ValidationError(f"duplicate minutiae in set {self.source_id!r}")

    def __len__(self):
        return len(self.minutiae)

    def as_array(self) -> np.ndarray:
        """``(N, 3)`` array of ``x, y, theta`` rows."""
        return np.array([(m.x, m.y, m.theta) for m in self.minutiae], dtype=float)

    @classmethod
    def from_array(cls, rows: Iterable[Sequence[float]], source_id: str = "") -> "MinutiaeSet":
        return cls(tuple(Minutia(float(r[0]), float(r[1]), float(r[2])) for r in rows), source_id)


def parse_minutiae(text: str, source_id: str = "") -> MinutiaeSet:
    """Parse ``x y theta`` lines; ``#`` starts a comment, blank lines are ignored."""
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ParseError(f"expected 3 numbers 'x y theta', got {len(parts)} fields", lineno)
        try:
            x, y, theta = (float(p) for p in parts)
        except ValueError:
            raise ParseError(f"not a number in {line!r}", lineno) from None
        if not all(math.isfinite(v) for v in (x, y, theta)):
            raise ParseError(f"non-finite value in {line!r}", lineno)
        rows.append(Minutia(x, y, theta))
    if not rows:
        raise EmptyInputError("no minutiae found in input")
    return MinutiaeSet(tuple(rows), source_id)


def format_minutiae(mset: MinutiaeSet) -> str:
    """Canonical text form; ``repr`` floats make parse/format round-trip exactly."""
    return "".join(f"{m.x!r} {m.y!r} {m.theta!r}\n" for m in mset.minutiae)


def read_minutiae_file(path, source_id: str | None = None) -> MinutiaeSet:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return parse_minutiae(text, source_id if source_id is not None else str(path))


@dataclass(frozen=True)
class DescriptorParams:
    radius: float = 70.0
    grid: int = 8
    angular_bins: int = 6
    sigma_s: float | None = None  # defaults to radius / 6
    sigma_a: float = math.pi / 6

    def __post_init__(self):
        if not self.radius > 0:
            raise ValidationError(f"radius must be positive, got {self.radius}")
        if self.grid < 1 or self.angular_bins < 1:
            raise ValidationError("grid and angular_bins must be >= 1")
        if self.sigma_s is not None and not self.sigma_s > 0:
            raise ValidationError("sigma_s must be positive")
        if not self.sigma_a > 0:
            raise ValidationError("sigma_a must be positive")

    @property
    def spatial_sigma(self) -> float:
        return self.sigma_s if self.sigma_s is not None else self.radius / 6.0

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.grid, self.grid, self.angular_bins)

    def cell_centers(self) -> np.ndarray:
        """Spatial cell centres along one axis of the ``[-R, R]`` square."""
        step = 2.0 * self.radius / self.grid
        return -self.radius + (np.arange(self.grid) + 0.5) * step

    def bin_centers(self) -> np.ndarray:
        """Angular bin centres; bin 0 is centred on a zero direction difference."""
        return np.arange(self.angular_bins) * (TWO_PI / self.angular_bins)


@dataclass(frozen=True, eq=False)
class DescriptorSet:
    """One ``(grid, grid, angular_bins)`` cell array per minutia, values in ``[0, 1]``."""

    cells: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        if self.cells.ndim != 4:
            raise DimensionError(f"cells must be 4-D (N, g, g, a), got shape {self.cells.shape}")

    @property
    def grid_shape(self) -> tuple[int, ...]:
        return tuple(self.cells.shape[1:])

    def __len__(self):
        return self.cells.shape[0]

    def flat(self) -> np.ndarray:
        return self.cells.reshape(self.cells.shape[0], -1)


def _wrap_pi(a):
    """Wrap angles to ``(-pi, pi]``."""
    return np.pi - np.mod(np.pi - a, TWO_PI)


def build_descriptor(mset: MinutiaeSet, params: DescriptorParams = DescriptorParams()) -> DescriptorSet:
    pts = mset.as_array()
    n = len(pts)
    cells = np.zeros((n,) + params.shape)
    centers = params.cell_centers()
    bins = params.bin_centers()
    two_ss = 2.0 * params.spatial_sigma ** 2
    two_sa = 2.0 * params.sigma_a ** 2

    for r in range(n):
        xr, yr, tr = pts[r]
        dx = pts[:, 0] - xr
        dy = pts[:, 1] - yr
        near = np.hypot(dx, dy) <= params.radius
        near[r] = False
        if not near.any():
            continue
        c, s = math.cos(tr), math.sin(tr)
        # neighbour coordinates in the frame where the reference points along +x
        ax = c * dx[near] + s * dy[near]
        ay = -s * dx[near] + c * dy[near]
        dtheta = _wrap_pi(pts[near, 2] - tr)

        wx = np.exp(-((centers[:, None] - ax[None, :]) ** 2) / two_ss)  # (g, K)
        wy = np.exp(-((centers[:, None] - ay[None, :]) ** 2) / two_ss)  # (g, K)
        wa = np.exp(-(_wrap_pi(bins[:, None] - dtheta[None, :]) ** 2) / two_sa)  # (a, K)
        # cell (i, j, b) indexes (x, y, direction)
        cells[r] = np.einsum("ik,jk,bk->ijb", wx, wy, wa)

    np.clip(cells, 0.0, 1.0, out=cells)
    return DescriptorSet(cells, mset.source_id)


def cylinder_similarities(a: DescriptorSet, b: DescriptorSet) -> np.ndarray:
    """Similarity of every cylinder of ``a`` against every cylinder of ``b``.

    ``1 - |u - v| / (|u| + |v|)``; a pair where both cylinders are empty scores 0.
    """
    if a.grid_shape != b.grid_shape:
        raise DimensionError(f"grid mismatch: {a.grid_shape} vs {b.grid_shape}")
    fa, fb = a.flat(), b.flat()
    na = np.linalg.norm(fa, axis=1)
    nb = np.linalg.norm(fb, axis=1)
    dist = cdist(fa, fb)
    denom = na[:, None] + nb[None, :]
    out = np.zeros_like(dist)
    np.divide(dist, denom, out=out, where=denom > 0)
    sim = np.where(denom > 0, 1.0 - out, 0.0)
    return np.clip(sim, 0.0, 1.0)


def pairwise_similarity(a: DescriptorSet, b: DescriptorSet) -> float:
    """Impression similarity in ``[0, 1]``.

    Only non-empty cylinders take part. The cross-pair similarities are
    sorted and the top ``min(|a|, |b|, 12)`` averaged.
    """
    if a.grid_shape != b.grid_shape:
        raise DimensionError(f"grid mismatch: {a.grid_shape} vs {b.grid_shape}")
    va = a.flat().any(axis=1)
    vb = b.flat().any(axis=1)
    n_pairs = min(int(va.sum()), int(vb.sum()), MAX_CONSOLIDATED_PAIRS)
    if n_pairs == 0:
        return 0.0
    sims = cylinder_similarities(
        DescriptorSet(a.cells[va]), DescriptorSet(b.cells[vb])
    ).ravel()
    top = np.sort(sims)[::-1][:n_pairs]
    return float(min(1.0, max(0.0, top.sum() / n_pairs)))


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    scores: np.ndarray
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=float)
        object.__setattr__(self, "scores", scores)
        labels = tuple(self.labels) or tuple(str(i) for i in range(scores.shape[0]))
        object.__setattr__(self, "labels", labels)
        validate_similarity(scores, labels)

    def __len__(self):
        return self.scores.shape[0]


def validate_similarity(scores: np.ndarray, labels: Sequence[str], tol: float = 1e-9) -> None:
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ValidationError(f"similarity matrix must be square, got shape {scores.shape}")
    n = scores.shape[0]
    if len(labels) != n:
        raise ValidationError(f"{len(labels)} labels for a {n}x{n} matrix")
    if not np.all(np.isfinite(scores)):
        i, j = np.argwhere(~np.isfinite(scores))[0]
        raise ValidationError(f"non-finite entry at ({i + 1},{j + 1})")
    bad = np.argwhere((scores < 0.0) | (scores > 1.0))
    if len(bad):
        i, j = bad[0]
        raise ValidationError(f"range error: entry ({i + 1},{j + 1}) = {scores[i, j]!r} outside [0,1]")
    asym = np.argwhere(np.abs(scores - scores.T) > tol)
    if len(asym):
        i, j = asym[0]
        raise ValidationError(
            f"symmetry error at ({i + 1},{j + 1})/({j + 1},{i + 1}): "
            f"{scores[i, j]!r} != {scores[j, i]!r}"
        )
    diag = np.flatnonzero(np.abs(np.diag(scores) - 1.0) > tol)
    if len(diag):
        i = diag[0]
        raise ValidationError(f"diagonal entry ({i + 1},{i + 1}) = {scores[i, i]!r}, expected 1")


def load_similarity_matrix(source) -> SimilarityMatrix:
    """Read a labelled square CSV (first row = labels) from a path or text stream."""
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, encoding="utf-8", newline="") as fh:
            return load_similarity_matrix(fh)
    rows = [r for r in csv.reader(source) if r and any(c.strip() for c in r)]
    if not rows:
        raise EmptyInputError("similarity CSV is empty")
    labels = [c.strip() for c in rows[0]]
    body = rows[1:]
    if len(body) != len(labels) or any(len(r) != len(labels) for r in body):
        raise ValidationError(
            f"similarity matrix is not square: {len(labels)} labels, "
            f"{len(body)} rows of widths {sorted({len(r) for r in body})}"
        )
    try:
        scores = np.array([[float(c) for c in r] for r in body])
    except ValueError as exc:
        raise ValidationError(f"non-numeric entry: {exc}") from None
    return SimilarityMatrix(scores, tuple(labels))


def write_similarity_matrix(sim: SimilarityMatrix, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(sim.labels)
    for row in sim.scores:
        w.writerow([repr(float(v)) for v in row])


def similarity_matrix(descriptors: Sequence[DescriptorSet], labels: Sequence[str] | None = None) -> SimilarityMatrix:
    """All-pairs impression similarity with a unit diagonal."""
    n = len(descriptors)
    scores = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            scores[i, j] = scores[j, i] = pairwise_similarity(descriptors[i], descriptors[j])
    if labels is None:
        labels = [d.source_id or str(i) for i, d in enumerate(descriptors)]
    return SimilarityMatrix(scores, tuple(labels))


def similarities_to(query: DescriptorSet, gallery: Sequence[DescriptorSet]) -> np.ndarray:
    return np.array([pairwise_similarity(query, g) for g in gallery])


def similarity_csv_text(sim: SimilarityMatrix) -> str:
    buf = io.StringIO()
    write_similarity_matrix(sim, buf)
    return buf.getvalue()
