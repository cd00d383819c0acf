"""Datasets of users and impressions, synthetic generation and FVC pairing."""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .descriptor import TWO_PI, MinutiaeSet, format_minutiae, read_minutiae_file
from .errors import DomainError, ValidationError

FRAME_SIZE = 400.0


@dataclass(frozen=True)
class User:
    user_id: str
    impressions: tuple[MinutiaeSet, ...]


@dataclass(frozen=True)
class Dataset:
    users: tuple[User, ...]
    name: str = ""

    def __post_init__(self):
        if len(self.users) < 2:
            raise ValidationError("a dataset needs at least two users")
        if any(len(u.impressions) < 2 for u in self.users):
            raise ValidationError("every user needs at least two impressions")

    @property
    def num_users(self) -> int:
        return len(self.users)

    def impressions(self):
        """Yield ``(user_index, impression_index, MinutiaeSet)`` in dataset order."""
        for u, user in enumerate(self.users):
            for i, imp in enumerate(user.impressions):
                yield u, i, imp


@dataclass(frozen=True)
class NoiseSpec:
    pos_sigma: float = 2.0  # pixels
    angle_sigma: float = 0.05  # radians
    drop_prob: float = 0.0
    add_max: int = 0  # spurious minutiae added per impression, uniform in 0..add_max

    def __post_init__(self):
        if self.pos_sigma < 0 or self.angle_sigma < 0:
            raise DomainError("noise sigmas must be non-negative")
        if not 0.0 <= self.drop_prob < 1.0:
            raise DomainError("drop_prob must lie in [0, 1)")
        if self.add_max < 0:
            raise DomainError("add_max must be non-negative")


DEFAULT_NOISE = NoiseSpec(pos_sigma=2.0, angle_sigma=0.05, drop_prob=0.05, add_max=2)


def _ground_truth(rng: np.random.Generator) -> np.ndarray:
    count = int(rng.integers(20, 41))
    xy = rng.uniform(0.0, FRAME_SIZE, size=(count, 2))
    theta = rng.uniform(0.0, TWO_PI, size=count)
    return np.column_stack([xy, theta])


def _impression(truth: np.ndarray, noise: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    pts = truth.copy()
    pts[:, :2] += rng.normal(0.0, noise.pos_sigma, size=(len(pts), 2)) if noise.pos_sigma else 0.0
    pts[:, 2] += rng.normal(0.0, noise.angle_sigma, size=len(pts)) if noise.angle_sigma else 0.0
    if noise.drop_prob:
        keep = rng.random(len(pts)) >= noise.drop_prob
        if keep.sum() < 2:
            keep[:2] = True
        pts = pts[keep]
    if noise.add_max:
        extra = int(rng.integers(0, noise.add_max + 1))
        if extra:
            pts = np.vstack([pts, _ground_truth(rng)[:extra]])
    pts[:, 2] = np.mod(pts[:, 2], TWO_PI)
    return pts


def synth_dataset(num_users: int, impressions: int, noise: NoiseSpec = DEFAULT_NOISE,
                  seed: int = 0) -> Dataset:
    """Random ground-truth fingers in a 400 x 400 px frame plus noisy impressions."""
    if num_users < 2 or impressions < 2:
        raise DomainError("need at least 2 users and 2 impressions per user")
    rng = np.random.default_rng(seed)
    users = []
    for u in range(num_users):
        truth = _ground_truth(rng)
        imps = []
        for i in range(impressions):
            pts = _impression(truth, noise, rng)
            # a duplicate can only come from an exact collision; drop it
            _, first = np.unique(pts, axis=0, return_index=True)
            pts = pts[np.sort(first)]
            imps.append(MinutiaeSet.from_array(pts, f"{u + 1}_{i + 1}"))
        users.append(User(str(u + 1), tuple(imps)))
    return Dataset(tuple(users), f"synth:{num_users}x{impressions}:seed{seed}")


def fvc_protocol_pairs(dataset: Dataset):
    """Genuine: every unordered impression pair of each user.
    Impostor: first impressions of every unordered user pair.
    Pairs are ``((user, impression), (user, impression))`` index tuples."""
    genuine = [
        ((u, i), (u, j))
        for u, user in enumerate(dataset.users)
        for i, j in itertools.combinations(range(len(user.impressions)), 2)
    ]
    impostor = [((a, 0), (b, 0)) for a, b in itertools.combinations(range(dataset.num_users), 2)]
    return genuine, impostor


_FVC_NAME = re.compile(r"^(?P<user>[^_]+)_(?P<imp>\d+)$")


def load_dataset_dir(path) -> Dataset:
    """Load ``<user>_<impression>.txt`` minutiae files (FVC naming, e.g. ``101_3.txt``)."""
    root = Path(path)
    groups: dict[str, list[tuple[int, Path]]] = {}
    for f in sorted(root.glob("*.txt")):
        m = _FVC_NAME.match(f.stem)
        if not m:
            continue
        groups.setdefault(m["user"], []).append((int(m["imp"]), f))
    if not groups:
        raise ValidationError(f"no '<user>_<impression>.txt' files in {root}")

    def user_key(u):
        return (0, int(u), u) if u.isdigit() else (1, 0, u)

    users = []
    for u in sorted(groups, key=user_key):
        files = sorted(groups[u])
        users.append(User(u, tuple(read_minutiae_file(f, f.stem) for _, f in files)))
    return Dataset(tuple(users), root.name)


def write_dataset_dir(dataset: Dataset, path) -> list[Path]:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    for user in dataset.users:
        for i, imp in enumerate(user.impressions, start=1):
            f = root / f"{user.user_id}_{i}.txt"
            f.write_text(format_minutiae(imp), encoding="utf-8")
            written.append(f)
    return written


def parse_dataset_spec(spec: str, noise: NoiseSpec = DEFAULT_NOISE, seed: int = 0) -> Dataset:
    """``synth:UxI`` for a synthetic dataset, anything else is a directory path."""
    if spec.startswith("synth:"):
        m = re.fullmatch(r"synth:(\d+)x(\d+)", spec)
        if not m:
            raise ValidationError(f"bad synthetic dataset spec {spec!r}, expected synth:<users>x<impressions>")
        return synth_dataset(int(m[1]), int(m[2]), noise, seed)
    return load_dataset_dir(spec)

