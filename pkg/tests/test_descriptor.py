import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cancelhash.dataset import NoiseSpec, synth_dataset
from cancelhash.descriptor import (
    DescriptorParams,
    DescriptorSet,
    Minutia,
    MinutiaeSet,
    build_descriptor,
    format_minutiae,
    load_similarity_matrix,
    pairwise_similarity,
    parse_minutiae,
    similarity_csv_text,
    similarity_matrix,
)
from cancelhash.errors import (
    DimensionError,
    EmptyInputError,
    ParseError,
    ValidationError,
)


def test_parse_single_line():
    ms = parse_minutiae("10 20 0.5")
    assert ms.minutiae == (Minutia(10.0, 20.0, 0.5),)


def test_parse_normalises_theta():
    ms = parse_minutiae("0 0 6.8832")
    assert ms.minutiae[0].theta == pytest.approx(6.8832 - 2 * math.pi)
    assert ms.minutiae[0].theta == pytest.approx(0.6000, abs=1e-4)


def test_parse_skips_comments():
    ms = parse_minutiae("# hdr\n1 2 0.1\n3 4 0.2\n")
    assert len(ms) == 2


def test_parse_errors_name_the_line():
    with pytest.raises(ParseError, match="line 2"):
        parse_minutiae("1 2 0.1\n1 2\n")
    with pytest.raises(ParseError, match="line 1"):
        parse_minutiae("a b c")
    with pytest.raises(EmptyInputError):
        parse_minutiae("# only a comment\n\n")


def test_duplicates_rejected():
    with pytest.raises(ValidationError):
        parse_minutiae("1 2 0.1\n1 2 0.1\n")


finite = st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False)


@given(st.lists(st.tuples(finite, finite, st.floats(0, 6.28)), min_size=1, max_size=20, unique=True))
def test_format_parse_round_trip(rows):
    ms = MinutiaeSet.from_array(rows)
    text = format_minutiae(ms)
    again = parse_minutiae(text)
    assert again.minutiae == ms.minutiae
    assert format_minutiae(again) == text


def test_single_minutia_gives_zero_cells():
    d = build_descriptor(parse_minutiae("5 5 1.0"))
    assert d.cells.shape == (1, 8, 8, 6)
    assert not d.cells.any()


def _brute_force_cells(ref, others, p: DescriptorParams):
    """Direct evaluation of the cell formula, one cell at a time."""
    xr, yr, tr = ref
    g, a = p.grid, p.angular_bins
    step = 2 * p.radius / g
    out = np.zeros((g, g, a))
    for i in range(g):
        for j in range(g):
            for b in range(a):
                cx = -p.radius + (i + 0.5) * step
                cy = -p.radius + (j + 0.5) * step
                cb = b * 2 * math.pi / a
                total = 0.0
                for x, y, t in others:
                    dx, dy = x - xr, y - yr
                    if math.hypot(dx, dy) > p.radius:
                        continue
                    ax = math.cos(tr) * dx + math.sin(tr) * dy
                    ay = -math.sin(tr) * dx + math.cos(tr) * dy
                    dth = math.atan2(math.sin(cb - (t - tr)), math.cos(cb - (t - tr)))
                    total += (math.exp(-((cx - ax) ** 2 + (cy - ay) ** 2) / (2 * p.spatial_sigma ** 2))
                              * math.exp(-dth ** 2 / (2 * p.sigma_a ** 2)))
                out[i, j, b] = min(1.0, total)
    return out


def test_two_minutiae_peak_at_neighbour_cell():
    p = DescriptorParams()
    r = 0.1 * p.radius
    ang = math.radians(30)
    nb = (100 + r * math.cos(ang), 100 + r * math.sin(ang), 0.0)
    d = build_descriptor(MinutiaeSet.from_array([(100, 100, 0.0), nb]), p)
    oracle = _brute_force_cells((100, 100, 0.0), [nb], p)
    np.testing.assert_allclose(d.cells[0], oracle, atol=1e-12)
    # neighbour sits at (6.06, 3.5) in the aligned frame: cell (4, 4), bin 0
    assert np.unravel_index(np.argmax(d.cells[0]), d.cells[0].shape) == (4, 4, 0)


def test_brute_force_matches_on_random_set():
    rng = np.random.default_rng(3)
    pts = np.column_stack([rng.uniform(0, 120, 8), rng.uniform(0, 120, 8), rng.uniform(0, 6.28, 8)])
    p = DescriptorParams(radius=60, grid=4, angular_bins=3)
    d = build_descriptor(MinutiaeSet.from_array(pts), p)
    for r in range(len(pts)):
        others = [tuple(pts[k]) for k in range(len(pts)) if k != r]
        np.testing.assert_allclose(d.cells[r], _brute_force_cells(tuple(pts[r]), others, p), atol=1e-12)


def _random_set(seed, n=15):
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.uniform(0, 150, n), rng.uniform(0, 150, n), rng.uniform(0, 6.28, n)])


@given(st.integers(0, 10_000), finite, finite)
@settings(max_examples=25, deadline=None)
def test_translation_invariance(seed, tx, ty):
    pts = _random_set(seed)
    moved = pts + [tx, ty, 0.0]
    a = build_descriptor(MinutiaeSet.from_array(pts))
    b = build_descriptor(MinutiaeSet.from_array(moved))
    np.testing.assert_allclose(a.cells, b.cells, atol=1e-9)


def test_rotation_about_reference_invariance():
    pts = _random_set(11)
    ref = pts[0, :2]
    c, s = math.cos(math.pi / 2), math.sin(math.pi / 2)
    rel = pts[:, :2] - ref
    rot = np.column_stack([ref[0] + c * rel[:, 0] - s * rel[:, 1],
                           ref[1] + s * rel[:, 0] + c * rel[:, 1],
                           pts[:, 2] + math.pi / 2])
    a = build_descriptor(MinutiaeSet.from_array(pts))
    b = build_descriptor(MinutiaeSet.from_array(rot))
    np.testing.assert_allclose(a.cells, b.cells, atol=1e-9)


def test_cells_in_unit_interval_when_crowded():
    # 30 coincident-direction neighbours saturate and must be clamped
    pts = [(50 + 0.1 * i, 50, 0.0) for i in range(30)]
    d = build_descriptor(MinutiaeSet.from_array(pts))
    assert d.cells.max() == 1.0 and d.cells.min() >= 0.0


def test_similarity_identity_zero_and_symmetry():
    a = build_descriptor(MinutiaeSet.from_array(_random_set(1)))
    b = build_descriptor(MinutiaeSet.from_array(_random_set(2)))
    empty = build_descriptor(parse_minutiae("1 1 0"))
    assert pairwise_similarity(a, a) == 1.0
    assert pairwise_similarity(a, empty) == 0.0
    assert pairwise_similarity(a, b) == pairwise_similarity(b, a)
    assert 0.0 <= pairwise_similarity(a, b) <= 1.0


def test_similarity_grid_mismatch():
    a = build_descriptor(MinutiaeSet.from_array(_random_set(1)))
    b = build_descriptor(MinutiaeSet.from_array(_random_set(1)), DescriptorParams(grid=4))
    with pytest.raises(DimensionError):
        pairwise_similarity(a, b)


def test_same_finger_beats_other_finger_over_100_trios():
    ds = synth_dataset(100, 2, NoiseSpec(pos_sigma=2.0, angle_sigma=0.05), seed=21)
    desc = [[build_descriptor(m) for m in u.impressions] for u in ds.users]
    rng = np.random.default_rng(0)
    wins = 0
    for u in range(100):
        v = int(rng.choice([x for x in range(100) if x != u]))
        wins += pairwise_similarity(desc[u][0], desc[u][1]) > pairwise_similarity(desc[u][0], desc[v][0])
    assert wins == 100


def test_similarity_csv_accepts_valid():
    sim = load_similarity_matrix(io.StringIO("a,b\n1,0.3\n0.3,1\n"))
    assert sim.labels == ("a", "b")
    assert sim.scores[0, 1] == 0.3


@pytest.mark.parametrize("body, message", [
    ("1,0.3\n0.4,1\n", r"symmetry error at \(1,2\)/\(2,1\)"),
    ("1,1.2\n1.2,1\n", "range error"),
    ("1,0.3\n", "not square"),
    ("0.9,0.3\n0.3,1\n", "diagonal"),
])
def test_similarity_csv_rejections(body, message):
    with pytest.raises(ValidationError, match=message):
        load_similarity_matrix(io.StringIO("a,b\n" + body))


def test_similarity_csv_round_trip():
    descs = [build_descriptor(MinutiaeSet.from_array(_random_set(s))) for s in range(4)]
    sim = similarity_matrix(descs, ["w", "x", "y", "z"])
    back = load_similarity_matrix(io.StringIO(similarity_csv_text(sim)))
    assert back.labels == sim.labels
    assert np.array_equal(back.scores, sim.scores)


def test_descriptor_set_shape_check():
    with pytest.raises(DimensionError):
        DescriptorSet(np.zeros((2, 8, 8)))
