"""Evaluation harness: pipeline, error rates, revocability, unlinkability, sweeps."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import _rng
from .dataset import Dataset, fvc_protocol_pairs
from .descriptor import (
    DescriptorParams,
    DescriptorSet,
    build_descriptor,
    pairwise_similarity,
    similarities_to,
    similarity_matrix,
)
from .errors import DomainError, InsufficientDataError, ValidationError
from .hashing import UserKey, enroll_batch
from .kpca import KernelParams, TrainedProjection, build_kernel_matrix, fit, project_query
from .matching import agreement

log = logging.getLogger(__name__)

FMR_TARGETS = (0.001, 0.01)
HIST_BINS = 20


@dataclass(frozen=True)
class PipelineConfig:
    descriptor: DescriptorParams = DescriptorParams()
    kernel: KernelParams = KernelParams()


@dataclass(frozen=True)
class ScoreSet:
    genuine: tuple[float, ...] = ()
    impostor: tuple[float, ...] = ()
    pseudo_impostor: tuple[float, ...] = ()
    mated: tuple[float, ...] = ()
    non_mated: tuple[float, ...] = ()

    def __post_init__(self):
        for name in ("genuine", "impostor", "pseudo_impostor", "mated", "non_mated"):
            vals = tuple(float(v) for v in getattr(self, name))
            if any(not 0.0 <= v <= 1.0 for v in vals):
                raise DomainError(f"{name} scores must lie in [0, 1]")
            object.__setattr__(self, name, vals)


# --- features -----------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FeatureBank:
    """Descriptors and KPCA features of every impression of a dataset.

    The projection is trained on the first impression of each user only.
    """

    dataset: Dataset
    config: PipelineConfig
    descriptors: dict[tuple[int, int], DescriptorSet]
    trained: TrainedProjection
    index: dict[tuple[int, int], int]  # (user, impression) -> row of ``features``
    features: np.ndarray  # (num_impressions, d)

    def rows(self, pairs_side: Sequence[tuple[int, int]]) -> np.ndarray:
        return np.array([self.index[p] for p in pairs_side], dtype=np.int64)


def extract_features(dataset: Dataset, config: PipelineConfig = PipelineConfig()) -> FeatureBank:
    descriptors = {(u, i): build_descriptor(m, config.descriptor) for u, i, m in dataset.impressions()}
    gallery = [descriptors[(u, 0)] for u in range(dataset.num_users)]
    labels = [user.impressions[0].source_id or user.user_id for user in dataset.users]
    sim = similarity_matrix(gallery, labels)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        trained = fit(build_kernel_matrix(sim, config.kernel), config.kernel, labels)
    if trained.shrunk:
        log.warning("KPCA kept %d of %d requested components", trained.d, trained.requested_d)
    index, rows = {}, []
    for pos, ((u, i), desc) in enumerate(descriptors.items()):
        index[(u, i)] = pos
        rows.append(project_query(similarities_to(desc, gallery), trained, config.kernel).values)
    return FeatureBank(dataset, config, descriptors, trained, index, np.vstack(rows))


def user_keys(base: UserKey, num_users: int, seed: int | None = None) -> list[UserKey]:
    """Independent per-user keys sharing ``base``'s shape parameters."""
    root = base.master_seed if seed is None else seed
    return [base.rekeyed(_rng.mix(root, u + 1, "user"), f"user{u + 1}") for u in range(num_users)]


def reissued_keys(keys: Sequence[UserKey], reissue: int) -> list[UserKey]:
    return [k.rekeyed(_rng.mix(k.master_seed, reissue, "reissue"), f"{k.key_id}/r{reissue}") for k in keys]


def _key_list(keys, num_users: int) -> list[UserKey]:
    if isinstance(keys, UserKey):
        return [keys] * num_users  # lost-key scenario: everyone shares one key
    keys = list(keys)
    if len(keys) != num_users:
        raise ValidationError(f"{len(keys)} keys for {num_users} users")
    if len({k.params_digest() for k in keys}) != 1:
        raise ValidationError("all user keys must share the same template parameters")
    return keys


def encode_all(bank: FeatureBank, keys: Sequence[UserKey]) -> np.ndarray:
    """Codes for every impression, each under its own user's key; ``(rows, n)``."""
    out = np.zeros((len(bank.features), keys[0].n), dtype=np.int64)
    by_key: dict[UserKey, list[int]] = {}
    for (u, _), row in bank.index.items():
        by_key.setdefault(keys[u], []).append(row)
    for key, rows in by_key.items():
        out[rows] = enroll_batch(bank.features[rows], key)
    return out


def _pair_scores(codes_a: np.ndarray, codes_b: np.ndarray, bank: FeatureBank, pairs) -> np.ndarray:
    if not pairs:
        return np.zeros(0)
    ra = bank.rows([a for a, _ in pairs])
    rb = bank.rows([b for _, b in pairs])
    return agreement(codes_a[ra], codes_b[rb])


def run_pipeline(dataset: Dataset, keys, config: PipelineConfig = PipelineConfig(),
                 bank: FeatureBank | None = None) -> ScoreSet:
    """Protected-template scores over the FVC genuine and impostor pairs.

    ``keys`` is a single :class:`UserKey` (lost-key scenario) or one key per user.
    """
    bank = bank or extract_features(dataset, config)
    key_list = _key_list(keys, dataset.num_users)
    codes = encode_all(bank, key_list)
    genuine, impostor = fvc_protocol_pairs(dataset)
    return ScoreSet(
        genuine=_pair_scores(codes, codes, bank, genuine),
        impostor=_pair_scores(codes, codes, bank, impostor),
    )


def baseline_scores(bank: FeatureBank) -> dict[str, ScoreSet]:
    """Scores of the unprotected descriptor and of the transformed feature vectors.

    Feature vectors are compared by cosine similarity mapped to ``[0, 1]``.
    """
    genuine, impostor = fvc_protocol_pairs(bank.dataset)

    def desc(pairs):
        return [pairwise_similarity(bank.descriptors[a], bank.descriptors[b]) for a, b in pairs]

    def vec(pairs):
        out = []
        for a, b in pairs:
            x, y = bank.features[bank.index[a]], bank.features[bank.index[b]]
            denom = np.linalg.norm(x) * np.linalg.norm(y)
            cos = float(x @ y / denom) if denom > 0 else 0.0
            out.append(min(1.0, max(0.0, 0.5 * (1.0 + cos))))
        return out

    return {
        "unprotected": ScoreSet(genuine=desc(genuine), impostor=desc(impostor)),
        "transformed": ScoreSet(genuine=vec(genuine), impostor=vec(impostor)),
    }


# --- error rates ----------------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    eer: float
    thresholds: tuple[float, ...]
    fmr: tuple[float, ...]
    fnmr: tuple[float, ...]
    gmr_at: dict[float, float]
    gmr: float  # genuine match rate at the EER operating point
    fmr_at_eer: float
    histograms: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    params: dict[str, object] = field(default_factory=dict)

    @property
    def fmr_curve(self) -> list[tuple[float, float]]:
        return list(zip(self.thresholds, self.fmr))

    @property
    def fnmr_curve(self) -> list[tuple[float, float]]:
        return list(zip(self.thresholds, self.fnmr))


def error_curves(genuine, impostor):
    """FMR (impostor >= t) and FNMR (genuine < t) at every distinct observed score."""
    g = np.sort(np.asarray(genuine, dtype=float))
    im = np.sort(np.asarray(impostor, dtype=float))
    if g.size == 0 or im.size == 0:
        raise InsufficientDataError("need at least one genuine and one impostor score")
    t = np.unique(np.concatenate([g, im]))
    fmr = 1.0 - np.searchsorted(im, t, side="left") / im.size
    fnmr = np.searchsorted(g, t, side="left") / g.size
    return t, fmr, fnmr


def _lower_hull(points: np.ndarray) -> np.ndarray:
    pts = sorted(set(map(tuple, points)))
    hull: list[tuple[float, float]] = []
    for p in pts:
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            if (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1) <= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    return np.array(hull)


def rocch_eer(fmr: np.ndarray, fnmr: np.ndarray) -> float:
    """EER on the convex hull of the operating points.

    Interpolating between hull vertices corresponds to randomising between two
    thresholds, which is what makes the EER well defined for discrete scores.
    """
    pts = np.column_stack([np.append(fmr, 0.0), np.append(fnmr, 1.0)])
    hull = _lower_hull(pts)
    for (x1, y1), (x2, y2) in zip(hull[:-1], hull[1:]):
        f1, f2 = y1 - x1, y2 - x2
        if f1 >= 0 >= f2:
            if f1 == f2:
                return float(x1)
            lam = f1 / (f1 - f2)
            return float(x1 + lam * (x2 - x1))
    raise AssertionError("ROC hull never crosses FMR = FNMR")


def histogram(scores, edges: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(bin_centers, density)`` with density integrating to one."""
    scores = np.asarray(scores, dtype=float)
    centers = 0.5 * (edges[1:] + edges[:-1])
    if scores.size == 0:
        return centers, np.zeros_like(centers)
    counts, _ = np.histogram(scores, bins=edges)
    return centers, counts / (scores.size * np.diff(edges))


def score_edges(n: int | None = None, bins: int = HIST_BINS) -> np.ndarray:
    """Bin edges over ``[0, 1]``; with ``n`` given, one bin per score ``j / n``."""
    if n:
        return (np.arange(n + 2) - 0.5) / n
    return np.linspace(0.0, 1.0, bins + 1)


def compute_eer(scores: ScoreSet, params: Mapping[str, object] | None = None,
                grid_n: int | None = None) -> EvalReport:
    t, fmr, fnmr = error_curves(scores.genuine, scores.impostor)
    eer = rocch_eer(fmr, fnmr)
    gmr_at = {}
    for target in FMR_TARGETS:
        ok = fmr <= target
        gmr_at[target] = float(np.max(1.0 - fnmr[ok])) if ok.any() else 0.0
    edges = score_edges(grid_n)
    hists = {
        name: histogram(getattr(scores, name), edges)
        for name in ("genuine", "impostor", "pseudo_impostor", "mated", "non_mated")
        if getattr(scores, name)
    }
    return EvalReport(
        eer=eer,
        thresholds=tuple(t.tolist()),
        fmr=tuple(fmr.tolist()),
        fnmr=tuple(fnmr.tolist()),
        gmr_at=gmr_at,
        gmr=1.0 - eer,
        fmr_at_eer=eer,
        histograms=hists,
        params=dict(params or {}),
    )


# --- revocability and unlinkability -------------------------------------------


def overlap_coefficient(a, b, edges: np.ndarray | None = None) -> float:
    """Shared area of two normalised histograms on common bins, in ``[0, 1]``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise InsufficientDataError("overlap needs two non-empty score lists")
    edges = score_edges() if edges is None else edges
    pa = np.histogram(a, bins=edges)[0] / a.size
    pb = np.histogram(b, bins=edges)[0] / b.size
    return float(np.minimum(pa, pb).sum())


@dataclass(frozen=True)
class RevocabilityResult:
    scores: ScoreSet
    summary: dict[str, float]
    warnings: tuple[str, ...] = ()


def revocability_analysis(dataset: Dataset, base_keys, num_reissues: int,
                          config: PipelineConfig = PipelineConfig(),
                          reissue_keys: Sequence[Sequence[UserKey]] | None = None,
                          bank: FeatureBank | None = None) -> RevocabilityResult:
    """Pseudo-impostor scores: first impressions re-enrolled under different keys.

    Genuine and impostor scores use ``base_keys``. ``reissue_keys`` overrides
    the derived reissue keys (one per-user key list per reissue).
    """
    if num_reissues < 2:
        raise DomainError("num_reissues must be >= 2")
    bank = bank or extract_features(dataset, config)
    nu = dataset.num_users
    base = _key_list(base_keys, nu)
    if reissue_keys is None:
        reissue_keys = [reissued_keys(base, r) for r in range(1, num_reissues + 1)]
    reissue_keys = [_key_list(ks, nu) for ks in reissue_keys]
    if len(reissue_keys) != num_reissues:
        raise ValidationError(f"{len(reissue_keys)} reissue key sets for num_reissues={num_reissues}")

    notes = []
    firsts = bank.rows([(u, 0) for u in range(nu)])
    codes = []
    for ks in reissue_keys:
        per_user = np.vstack([enroll_batch(bank.features[firsts[u]][None, :], ks[u]) for u in range(nu)])
        codes.append(per_user)
    pseudo = []
    for r in range(num_reissues):
        for s in range(r + 1, num_reissues):
            same = [u for u in range(nu) if reissue_keys[r][u].master_seed == reissue_keys[s][u].master_seed]
            if same:
                notes.append(f"key reuse: reissues {r + 1} and {s + 1} share keys for {len(same)} user(s)")
            pseudo.extend(agreement(codes[r], codes[s]).tolist())

    base_scores = run_pipeline(dataset, base, config, bank)
    scores = replace(base_scores, pseudo_impostor=pseudo)
    summary = {
        "mean_genuine": float(np.mean(scores.genuine)),
        "mean_impostor": float(np.mean(scores.impostor)),
        "mean_pseudo_impostor": float(np.mean(scores.pseudo_impostor)),
    }
    summary["pseudo_impostor_gap"] = abs(summary["mean_pseudo_impostor"] - summary["mean_impostor"])
    summary["genuine_gap"] = summary["mean_genuine"] - summary["mean_pseudo_impostor"]
    for note in notes:
        log.warning(note)
    return RevocabilityResult(scores, summary, tuple(notes))


@dataclass(frozen=True)
class UnlinkabilityResult:
    scores: ScoreSet
    overlap: float
    mean_gap: float
    warnings: tuple[str, ...] = ()


def unlinkability_analysis(dataset: Dataset, keys_a, keys_b,
                           config: PipelineConfig = PipelineConfig(),
                           bank: FeatureBank | None = None) -> UnlinkabilityResult:
    """Mated: same finger (every impression pair, including an impression with
    itself), key sets A vs B. Non-mated: every impression pair of different
    fingers, A vs B."""
    bank = bank or extract_features(dataset, config)
    nu = dataset.num_users
    ka, kb = _key_list(keys_a, nu), _key_list(keys_b, nu)
    if ka[0].params_digest() != kb[0].params_digest():
        raise ValidationError("key sets A and B must share template parameters")
    notes = []
    reused = sum(a.master_seed == b.master_seed for a, b in zip(ka, kb))
    if reused:
        notes.append(f"key reuse: {reused} user(s) have the same key in both applications")
        log.warning(notes[-1])
    codes_a, codes_b = encode_all(bank, ka), encode_all(bank, kb)
    mated_pairs, non_mated_pairs = [], []
    for u, ui, _ in dataset.impressions():
        for v, vi, _ in dataset.impressions():
            (mated_pairs if u == v else non_mated_pairs).append(((u, ui), (v, vi)))
    mated = _pair_scores(codes_a, codes_b, bank, mated_pairs)
    non_mated = _pair_scores(codes_a, codes_b, bank, non_mated_pairs)
    edges = score_edges(ka[0].n)
    return UnlinkabilityResult(
        ScoreSet(mated=mated, non_mated=non_mated),
        overlap_coefficient(mated, non_mated, edges),
        float(np.mean(mated) - np.mean(non_mated)),
        tuple(notes),
    )


# --- sweeps and report files ----------------------------------------------------


@dataclass(frozen=True)
class SweepRow:
    k: int
    s_key: int
    report: EvalReport | None
    warning: str = ""


def sweep(dataset: Dataset, ks: Sequence[int], skeys: Sequence[int], base_key: UserKey,
          config: PipelineConfig = PipelineConfig(), per_user: bool = False,
          bank: FeatureBank | None = None) -> list[SweepRow]:
    """One report per (k, s_key) cell; cells with ``l % k != 0`` become warning rows."""
    if not ks or not skeys:
        raise ValidationError("sweep grid is empty")
    bank = bank or extract_features(dataset, config)
    rows = []
    for k in ks:
        for s in skeys:
            if base_key.l % k:
                msg = f"skipped: k={k} does not divide l={base_key.l}"
                log.warning(msg)
                rows.append(SweepRow(k, s, None, msg))
                continue
            key = replace(base_key, k=k, s_key=s)
            keys = user_keys(key, dataset.num_users) if per_user else key
            scores = run_pipeline(dataset, keys, config, bank)
            rows.append(SweepRow(k, s, compute_eer(scores, report_params(key, config, bank), key.n)))
    return rows


def report_params(key: UserKey, config: PipelineConfig, bank: FeatureBank | None = None) -> dict:
    return {
        "k": key.k, "s_key": key.s_key, "n": key.n, "p": key.p, "l": key.l,
        "sigma2": config.kernel.sigma2,
        "d": bank.trained.d if bank is not None else config.kernel.d,
    }


def fmt9(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".9g")


REPORT_COLUMNS = ("dataset", "method", "k", "s_key", "n", "p", "l", "sigma2", "d", "eer", "gmr", "fmr",
                  "gmr_at_fmr1pct", "gmr_at_fmr0.1pct", "status")
PARAM_COLUMNS = ("k", "s_key", "n", "p", "l", "sigma2", "d")


def report_row(dataset_name: str, method: str, params: Mapping, report: EvalReport | None,
               status: str = "ok") -> list[str]:
    """One CSV row; parameters that do not apply to ``method`` are left blank."""
    base = [dataset_name, method] + [fmt9(params.get(c)) for c in PARAM_COLUMNS]
    if report is None:
        return base + ["", "", "", "", "", status]
    return base + [fmt9(report.eer), fmt9(report.gmr), fmt9(report.fmr_at_eer),
                   fmt9(report.gmr_at[0.01]), fmt9(report.gmr_at[0.001]), status]


def write_report_csv(path, rows: Sequence[Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        w.writerows(rows)


def write_curves_csv(path, report: EvalReport) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("threshold", "fmr", "fnmr"))
        for t, a, b in zip(report.thresholds, report.fmr, report.fnmr):
            w.writerow((fmt9(t), fmt9(a), fmt9(b)))


def write_histogram_csv(path, centers: np.ndarray, density: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("bin_center", "density"))
        for c, d in zip(centers, density):
            w.writerow((fmt9(c), fmt9(d)))


def write_scores_csv(path, scores: ScoreSet) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("kind", "score"))
        for name in ("genuine", "impostor", "pseudo_impostor", "mated", "non_mated"):
            for v in getattr(scores, name):
                w.writerow((name, fmt9(v)))


def write_report_bundle(out: Path, dataset_name: str, report: EvalReport) -> list[Path]:
    """Companion files next to ``out``: curves and one histogram per score kind."""
    out = Path(out)
    stem = out.with_suffix("")
    written = [stem.with_name(stem.name + "_curves.csv")]
    write_curves_csv(written[0], report)
    for name, (c, d) in report.histograms.items():
        p = stem.with_name(f"{stem.name}_hist_{name}.csv")
        write_histogram_csv(p, c, d)
        written.append(p)
    return written
