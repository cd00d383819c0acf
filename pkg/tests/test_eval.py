import csv
import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cancelhash.dataset import NoiseSpec, fvc_protocol_pairs, load_dataset_dir, synth_dataset, write_dataset_dir
from cancelhash.descriptor import format_minutiae, pairwise_similarity
from cancelhash.errors import DomainError, InsufficientDataError, ValidationError
from cancelhash.evaluation import (
    REPORT_COLUMNS,
    ScoreSet,
    baseline_scores,
    compute_eer,
    encode_all,
    error_curves,
    extract_features,
    fmt9,
    histogram,
    overlap_coefficient,
    report_params,
    report_row,
    revocability_analysis,
    run_pipeline,
    score_edges,
    sweep,
    unlinkability_analysis,
    user_keys,
    write_report_csv,
)
from cancelhash.hashing import UserKey


# --- EER --------------------------------------------------------------------

def _eer(g, i):
    return compute_eer(ScoreSet(genuine=g, impostor=i)).eer


def test_eer_examples():
    assert _eer([0.9] * 5, [0.1] * 5) == 0.0
    assert _eer([0.2, 0.5, 0.8], [0.2, 0.5, 0.8]) == pytest.approx(0.5)
    assert _eer([0.8, 0.6], [0.7, 0.3]) == pytest.approx(0.25)


def _pairwise_mixture_eer(g, i):
    """min over every segment between two operating points of max(FMR, FNMR)."""
    g, i = np.asarray(g), np.asarray(i)
    pts = [(0.0, 1.0), (1.0, 0.0)]
    for t in sorted(set(g) | set(i)):
        pts.append((float(np.mean(i >= t)), float(np.mean(g < t))))
    best = min(max(p) for p in pts)
    for (x1, y1), (x2, y2) in itertools.combinations(pts, 2):
        f1, f2 = x1 - y1, x2 - y2
        if f1 * f2 < 0:
            lam = f1 / (f1 - f2)
            best = min(best, x1 + lam * (x2 - x1))
    return best


grid_scores = st.lists(st.integers(0, 10).map(lambda j: j / 10), min_size=1, max_size=25)


@given(grid_scores, grid_scores)
@settings(max_examples=200, deadline=None)
def test_eer_matches_brute_force_oracle(g, i):
    rep = compute_eer(ScoreSet(genuine=g, impostor=i))
    assert rep.eer == pytest.approx(_pairwise_mixture_eer(g, i), abs=1e-12)
    assert 0.0 <= rep.eer <= 0.5 + 1e-12
    assert all(a >= b for a, b in zip(rep.fmr, rep.fmr[1:]))
    assert all(a <= b for a, b in zip(rep.fnmr, rep.fnmr[1:]))
    assert rep.gmr + rep.fmr_at_eer == pytest.approx(1.0)


def test_error_curve_convention():
    t, fmr, fnmr = error_curves([0.5, 1.0], [0.5, 0.0])
    # impostor >= t is a false match, genuine < t a false non-match
    assert t.tolist() == [0.0, 0.5, 1.0]
    assert fmr.tolist() == [1.0, 0.5, 0.0]
    assert fnmr.tolist() == [0.0, 0.0, 0.5]


def test_gmr_at_targets():
    g = [0.9] * 99 + [0.1]
    imp = [0.05 * (k % 10) for k in range(1000)]
    rep = compute_eer(ScoreSet(genuine=g, impostor=imp))
    assert rep.gmr_at[0.01] == pytest.approx(0.99)
    assert rep.gmr_at[0.001] == pytest.approx(0.99)


def test_eer_needs_both_lists():
    with pytest.raises(InsufficientDataError):
        compute_eer(ScoreSet(genuine=[0.5]))


def test_scores_validated():
    with pytest.raises(DomainError):
        ScoreSet(genuine=[1.2])


def test_histogram_density_and_overlap():
    edges = score_edges(10)
    centers, dens = histogram([0.1, 0.1, 0.5, 1.0], edges)
    assert (dens * np.diff(edges)).sum() == pytest.approx(1.0)
    assert centers[0] == pytest.approx(0.0)
    assert overlap_coefficient([0.1, 0.2], [0.8, 0.9], edges) == 0.0
    assert overlap_coefficient([0.3, 0.6], [0.6, 0.3], edges) == 1.0


# --- datasets and protocol -------------------------------------------------

@pytest.mark.parametrize("u, i, ng, ni", [(100, 8, 2800, 4950), (2, 2, 2, 1), (3, 2, 3, 3)])
def test_fvc_counts(u, i, ng, ni):
    ds = synth_dataset(u, i, NoiseSpec(), seed=0)
    g, imp = fvc_protocol_pairs(ds)
    assert (len(g), len(imp)) == (ng, ni)
    assert all(a[0] == b[0] for a, b in g) and all(a[1] == b[1] == 0 for a, b in imp)


def test_synth_zero_noise_and_determinism():
    ds = synth_dataset(3, 3, NoiseSpec(0, 0, 0, 0), seed=4)
    for user in ds.users:
        assert len({format_minutiae(m) for m in user.impressions}) == 1
    a = synth_dataset(4, 2, seed=9)
    b = synth_dataset(4, 2, seed=9)
    assert [format_minutiae(m) for _, _, m in a.impressions()] == [format_minutiae(m) for _, _, m in b.impressions()]
    for user in a.users:
        assert all(20 <= len(m) <= 42 for m in user.impressions)


def test_synth_rejects_bad_noise():
    with pytest.raises(DomainError):
        NoiseSpec(pos_sigma=-1)
    with pytest.raises(DomainError):
        synth_dataset(1, 2)


def test_synth_intra_beats_inter(fixture_bank):
    d = fixture_bank.descriptors
    intra = [pairwise_similarity(d[(u, 0)], d[(u, 1)]) for u in range(30)]
    inter = [pairwise_similarity(d[(u, 0)], d[((u + 1) % 30, 0)]) for u in range(30)]
    assert np.mean(intra) > np.mean(inter)


def test_dataset_dir_round_trip(tmp_path):
    ds = synth_dataset(3, 2, seed=1)
    write_dataset_dir(ds, tmp_path)
    back = load_dataset_dir(tmp_path)
    assert [u.user_id for u in back.users] == ["1", "2", "3"]
    assert [format_minutiae(m) for _, _, m in back.impressions()] == [format_minutiae(m) for _, _, m in ds.impressions()]


# --- pipeline ----------------------------------------------------------------

def test_zero_noise_genuine_scores_are_one():
    ds = synth_dataset(4, 3, NoiseSpec(0, 0, 0, 0), seed=2)
    scores = run_pipeline(ds, UserKey(1, s_key=0))
    assert set(scores.genuine) == {1.0}


def test_lost_key_separates(fixture_dataset, fixture_bank):
    s = run_pipeline(fixture_dataset, UserKey(99), bank=fixture_bank)
    assert len(s.genuine) == 180 and len(s.impostor) == 435
    assert np.mean(s.genuine) > np.mean(s.impostor)


def test_per_user_impostors_follow_binomial(fixture_dataset, fixture_bank):
    base = UserKey(5)
    keys = user_keys(base, 30)
    s = run_pipeline(fixture_dataset, keys, bank=fixture_bank)
    codes = encode_all(fixture_bank, keys)
    # chance agreement of unrelated codes comes from the empirical code marginals
    _, counts = np.unique(codes, return_counts=True)
    q = float(((counts / counts.sum()) ** 2).sum())
    sigma = math.sqrt(q * (1 - q) / (base.n * len(s.impostor)))
    assert abs(np.mean(s.impostor) - q) <= 3 * sigma


def test_keys_must_cover_users(fixture_dataset, fixture_bank):
    with pytest.raises(ValidationError):
        run_pipeline(fixture_dataset, user_keys(UserKey(1), 29), bank=fixture_bank)


def test_baselines_separate(fixture_bank):
    b = baseline_scores(fixture_bank)
    for name in ("unprotected", "transformed"):
        assert np.mean(b[name].genuine) > np.mean(b[name].impostor)


# --- revocability / unlinkability ----------------------------------------------

def test_revocability_key_reuse_is_flagged(fixture_dataset, fixture_bank):
    keys = user_keys(UserKey(3), 30)
    res = revocability_analysis(fixture_dataset, keys, 2, reissue_keys=[keys, keys], bank=fixture_bank)
    assert set(res.scores.pseudo_impostor) == {1.0}
    assert res.warnings and "key reuse" in res.warnings[0]


def test_revocability_counts(fixture_dataset, fixture_bank):
    res = revocability_analysis(fixture_dataset, user_keys(UserKey(3), 30), 3, bank=fixture_bank)
    assert len(res.scores.pseudo_impostor) == 30 * 3
    assert not res.warnings
    with pytest.raises(DomainError):
        revocability_analysis(fixture_dataset, UserKey(3), 1, bank=fixture_bank)


def test_unlinkability_misuse_collapses_overlap(fixture_dataset, fixture_bank):
    keys = user_keys(UserKey(4), 30)
    res = unlinkability_analysis(fixture_dataset, keys, keys, bank=fixture_bank)
    assert res.warnings
    assert res.overlap < 0.5
    assert len(res.scores.mated) == 30 * 16 and len(res.scores.non_mated) == 120 * 116


# --- sweeps and reports ----------------------------------------------------------

def test_sweep_single_cell_and_warning_rows(fixture_dataset, fixture_bank):
    rows = sweep(fixture_dataset, [100], [2], UserKey(1), bank=fixture_bank)
    assert len(rows) == 1 and rows[0].report is not None
    rows = sweep(fixture_dataset, [75, 100], [2, 30], UserKey(1), bank=fixture_bank)
    assert len(rows) == 4
    assert [r.report is None for r in rows] == [True, True, False, False]
    assert "k=75" in rows[0].warning


def test_report_csv_format(tmp_path, fixture_dataset, fixture_bank):
    key = UserKey(1)
    rep = compute_eer(run_pipeline(fixture_dataset, key, bank=fixture_bank), grid_n=key.n)
    path = tmp_path / "r.csv"
    write_report_csv(path, [report_row("ds", "protected", report_params(key, fixture_bank.config, fixture_bank), rep)])
    rows = list(csv.reader(open(path)))
    assert tuple(rows[0]) == REPORT_COLUMNS
    assert rows[1][REPORT_COLUMNS.index("eer")] == fmt9(rep.eer)
    assert fmt9(1 / 3) == "0.333333333" and fmt9(7) == "7"


def test_pipeline_deterministic():
    small = synth_dataset(5, 3, seed=3)
    a = compute_eer(run_pipeline(small, UserKey(8)))
    b = compute_eer(run_pipeline(small, UserKey(8)))
    assert a.eer == b.eer and a.fmr == b.fmr and a.fnmr == b.fnmr


def test_features_only_train_on_first_impressions(fixture_bank):
    assert fixture_bank.trained.n_train == 30
    assert fixture_bank.features.shape == (120, fixture_bank.trained.d)
