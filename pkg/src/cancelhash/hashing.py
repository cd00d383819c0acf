"""Keyed permutation hashing with security-offset scrambling and shift-order selection.

For each of the ``n`` hash components a feature vector is tiled to length
``l``, passed through a composition of ``p`` keyed permutations, locally
scrambled by keyed offsets bounded by ``s_key``, reshaped into an ``m x k``
matrix and reduced by the shift-order process to a single window index in
``[1, k]``. The ``n`` indices form the protected template.

All keyed randomness comes from :mod:`cancelhash._rng`; every stream is
derived from the master seed and a tuple of indices and a domain tag, so
components can be computed independently and in any order.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import _rng
from .errors import (
    DimensionError,
    IncompatibleTemplateError,
    NumericError,
    ParseError,
    ValidationError,
)
from .kpca import FeatureVector

TEMPLATE_HEADER = "CFHT v1"
KEY_HEADER = "CFHK v1"
DIGEST_ALG = "sha256"

PERM_TAG = "perm"
SKEY_TAG = "skey"


@dataclass(frozen=True)
class UserKey:
    """User secret plus the public shape parameters of the template."""

    master_seed: int
    n: int = 10
    p: int = 3
    k: int = 100
    l: int = 500
    s_key: int = 2
    key_id: str = ""

    def __post_init__(self):
        if not 0 <= self.master_seed <= _rng.MASK64:
            raise ValidationError("master_seed must be a 64-bit unsigned integer")
        for name in ("n", "p", "k", "l"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.l % self.k:
            raise ValidationError(f"window size k={self.k} does not divide component length l={self.l}")
        if self.s_key < 0:
            raise ValidationError(f"s_key must be >= 0, got {self.s_key}")
        if self.s_key > self.l - 1:
            raise ValidationError(f"s_key={self.s_key} exceeds l - 1 = {self.l - 1}")

    @property
    def m(self) -> int:
        return self.l // self.k

    @property
    def low(self) -> int:
        return min(1, self.s_key)

    @property
    def high(self) -> int:
        return self.s_key

    def shape_string(self) -> str:
        return f"n={self.n};p={self.p};k={self.k};l={self.l};s_key={self.s_key}"

    def params_digest(self) -> str:
        return params_digest(self.n, self.p, self.k, self.l, self.s_key)

    def rekeyed(self, master_seed: int, key_id: str = "") -> "UserKey":
        return replace(self, master_seed=master_seed, key_id=key_id)


def params_digest(n: int, p: int, k: int, l: int, s_key: int) -> str:
    canonical = f"CFHT-params;n={n};p={p};k={k};l={l};s_key={s_key}"
    return hashlib.sha256(canonical.encode("ascii")).hexdigest()


@dataclass(frozen=True)
class PermutationSet:
    perms: tuple[tuple[int, ...], ...]  # each a permutation of 1..l

    @property
    def length(self) -> int:
        return len(self.perms[0]) if self.perms else 0


@dataclass
class HashComponent:
    values: np.ndarray  # (l,)
    bit_positions: np.ndarray  # (l,) one-based original indices
    component_index: int

    def copy(self) -> "HashComponent":
        return HashComponent(self.values.copy(), self.bit_positions.copy(), self.component_index)

    def check_positions(self) -> None:
        l = len(self.bit_positions)
        if not np.array_equal(np.sort(self.bit_positions), np.arange(1, l + 1)):
            raise ValidationError("bit_positions is no longer a permutation of 1..l")


@dataclass(frozen=True)
class HashCode:
    code: tuple[int, ...]
    params_digest: str
    subject_id: str = ""
    n: int = field(default=0)
    p: int = 0
    k: int = 0
    l: int = 0
    s_key: int = 0

    def __post_init__(self):
        object.__setattr__(self, "code", tuple(int(c) for c in self.code))
        if self.n and len(self.code) != self.n:
            raise ValidationError(f"code has {len(self.code)} entries, expected n={self.n}")
        if self.k and any(not 1 <= c <= self.k for c in self.code):
            raise ValidationError(f"code entries must lie in [1, {self.k}]")

    def __len__(self):
        return len(self.code)


def derive_permutation_set(key: UserKey, component_index: int) -> PermutationSet:
    if not 1 <= component_index <= key.n:
        raise ValidationError(f"component index {component_index} outside 1..{key.n}")
    return _permutation_set(key.master_seed, key.p, key.l, component_index)


@lru_cache(maxsize=4096)
def _permutation_set(master_seed: int, p: int, l: int, i: int) -> PermutationSet:
    perms = []
    for j in range(1, p + 1):
        stream = _rng.SplitMix64(_rng.mix(master_seed, i, j, PERM_TAG))
        perms.append(tuple(_rng.fisher_yates(l, stream)))
    return PermutationSet(tuple(perms))


def tile(values: np.ndarray, length: int) -> np.ndarray:
    """Repeat ``values`` cyclically (or truncate) to ``length`` entries."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise DimensionError("cannot tile an empty feature vector")
    return values[np.arange(length) % values.size]


def permute_and_sample(feature: FeatureVector, perms: PermutationSet, key: UserKey,
                       component_index: int = 1) -> HashComponent:
    """Tile the feature to length ``l`` and apply each permutation in turn.

    A permutation ``P`` acts by gathering: the value at slot ``t`` becomes the
    value previously at slot ``P[t]``. Bit positions travel with the values,
    so after the composition ``bit_positions[t]`` is the tiled index that
    slot ``t`` was sampled from.
    """
    values = tile(feature.values, key.l)
    positions = np.arange(1, key.l + 1)
    for perm in perms.perms:
        if len(perm) != key.l:
            raise DimensionError(f"permutation of length {len(perm)} for l={key.l}")
        idx = np.asarray(perm) - 1
        values = values[idx]
        positions = positions[idx]
    return HashComponent(values, positions, component_index)


def security_offsets(key: UserKey, component_index: int) -> np.ndarray:
    """Per-slot offsets drawn uniformly from ``[low, high]``; zero when ``s_key == 0``."""
    return np.array(_security_offsets(key.master_seed, key.l, key.low, key.high, component_index))


@lru_cache(maxsize=4096)
def _security_offsets(master_seed: int, l: int, low: int, high: int, i: int) -> tuple[int, ...]:
    if high == 0:
        return (0,) * l
    return tuple(
        _rng.SplitMix64(_rng.mix(master_seed, i, e, SKEY_TAG)).between(low, high)
        for e in range(1, l + 1)
    )


def scramble(comp: HashComponent, offsets: Sequence[int]) -> HashComponent:
    """Swap each slot with the slot ``offset`` places ahead, in slot order.

    Targets that wrap past the end of the component are skipped, which keeps
    the scramble local and makes a uniform offset of 1 a cyclic shift by
    one. Values and bit positions are swapped together.
    """
    out = comp.copy()
    l = len(out.values)
    vals, pos = out.values, out.bit_positions
    for e, o in enumerate(offsets):
        t = e + int(o)
        if o == 0 or t >= l:
            continue
        vals[e], vals[t] = vals[t], vals[e]
        pos[e], pos[t] = pos[t], pos[e]
    return out


def inject_security_param(comp: HashComponent, key: UserKey, component_index: int) -> HashComponent:
    return scramble(comp, security_offsets(key, component_index))


def shift_order(comp: HashComponent, k: int) -> tuple[float, int]:
    """Run the shift-order process on one component; returns ``(bin_value, code_index)``.

    Rows of the ``m x k`` matrix are visited in order. Each row nominates the
    larger of its first two entries (lower window index on ties), then is
    rotated left by one together with its bit positions. A nominee replaces
    the running winner only when strictly larger. ``comp`` is rotated in
    place; pass a copy to keep the original.
    """
    values = np.asarray(comp.values, dtype=float)
    l = values.size
    if l % k:
        raise DimensionError(f"component length {l} is not a multiple of k={k}")
    if not np.all(np.isfinite(values)):
        raise NumericError("shift_order received non-finite values")
    m = l // k
    rows = values.reshape(m, k)
    pos_rows = comp.bit_positions.reshape(m, k)
    carry, carry_index = -math.inf, 1
    for j in range(m):
        row = rows[j]
        if k == 1 or row[0] >= row[1]:
            cand, idx = row[0], 1
        else:
            cand, idx = row[1], 2
        rows[j] = np.roll(row, -1)
        pos_rows[j] = np.roll(pos_rows[j], -1)
        if cand > carry:
            carry, carry_index = float(cand), idx
    return carry, carry_index


def _component(feature: FeatureVector, key: UserKey, i: int) -> HashComponent:
    comp = permute_and_sample(feature, derive_permutation_set(key, i), key, i)
    return inject_security_param(comp, key, i)


def enroll_reference(feature: FeatureVector, key: UserKey) -> HashCode:
    """Stage-by-stage enrolment; slow but mirrors each step of the transform."""
    code = []
    for i in range(1, key.n + 1):
        comp = _component(feature, key, i)
        _, idx = shift_order(comp.copy(), key.k)
        code.append(idx)
    return _make_code(code, key, feature.subject_id)


def _make_code(code, key: UserKey, subject_id: str) -> HashCode:
    return HashCode(tuple(code), key.params_digest(), subject_id,
                    key.n, key.p, key.k, key.l, key.s_key)


@dataclass(frozen=True, eq=False)
class KeySchedule:
    """Precomputed slot-to-tiled-index maps for every component of a key.

    Because permutation and scramble are independent of the data, their
    composition is a fixed gather index per component; enrolment then reduces
    to one fancy-indexing step and a vectorised shift-order.
    """

    key: UserKey
    gather: np.ndarray  # (n, l) zero-based tiled indices

    @classmethod
    def build(cls, key: UserKey) -> "KeySchedule":
        return _schedule(key)

    def components(self, features: np.ndarray) -> np.ndarray:
        """``(N, d)`` features -> ``(N, n, l)`` scrambled component values."""
        features = np.atleast_2d(np.asarray(features, dtype=float))
        d = features.shape[1]
        if d == 0:
            raise DimensionError("cannot hash zero-length feature vectors")
        return features[:, self.gather % d]


@lru_cache(maxsize=1024)
def _schedule(key: UserKey) -> KeySchedule:
    rows = []
    for i in range(1, key.n + 1):
        comp = HashComponent(np.zeros(key.l), np.arange(1, key.l + 1), i)
        for perm in derive_permutation_set(key, i).perms:
            comp.bit_positions = comp.bit_positions[np.asarray(perm) - 1]
        comp = scramble(comp, security_offsets(key, i))
        rows.append(comp.bit_positions - 1)
    return KeySchedule(key, np.vstack(rows))


def shift_order_batch(values: np.ndarray, k: int) -> np.ndarray:
    """Vectorised shift-order over the last axis; returns code indices in ``{1, 2}``.

    The nominee of each row is the max of its first two entries, and the
    first row holding the largest nominee wins, which equals the sequential
    strict-improvement rule.
    """
    values = np.asarray(values, dtype=float)
    l = values.shape[-1]
    if l % k:
        raise DimensionError(f"component length {l} is not a multiple of k={k}")
    if not np.all(np.isfinite(values)):
        raise NumericError("shift_order received non-finite values")
    rows = values.reshape(values.shape[:-1] + (l // k, k))
    if k == 1:
        return np.ones(values.shape[:-1], dtype=np.int64)
    first, second = rows[..., 0], rows[..., 1]
    nominee = np.maximum(first, second)
    nominee_idx = np.where(first >= second, 1, 2)
    winner_row = np.argmax(nominee, axis=-1)
    return np.take_along_axis(nominee_idx, winner_row[..., None], axis=-1)[..., 0]


def enroll(feature: FeatureVector, key: UserKey) -> HashCode:
    codes = enroll_batch(feature.values[None, :], key)
    return _make_code(codes[0], key, feature.subject_id)


def enroll_batch(features: np.ndarray, key: UserKey) -> np.ndarray:
    """``(N, d)`` features -> ``(N, n)`` integer codes under one key."""
    sched = KeySchedule.build(key)
    return shift_order_batch(sched.components(features), key.k)


# --- key and template files ---------------------------------------------------


def _kv_lines(lines: Sequence[str], start: int, what: str) -> dict[str, str]:
    out = {}
    for no, line in enumerate(lines[start:], start=start + 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value in {what}", no)
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def dumps_key(key: UserKey) -> str:
    return (
        f"{KEY_HEADER}\n"
        f"key_id={key.key_id}\n"
        f"master_seed={key.master_seed:016x}\n"
        f"n={key.n}\np={key.p}\nk={key.k}\nl={key.l}\ns_key={key.s_key}\n"
    )


def loads_key(text: str) -> UserKey:
    lines = text.splitlines()
    if not lines or lines[0].strip() != KEY_HEADER:
        raise ParseError(f"missing '{KEY_HEADER}' header", 1)
    kv = _kv_lines(lines, 1, "key file")
    try:
        return UserKey(
            master_seed=int(kv["master_seed"], 16),
            n=int(kv["n"]), p=int(kv["p"]), k=int(kv["k"]), l=int(kv["l"]),
            s_key=int(kv["s_key"]), key_id=kv.get("key_id", ""),
        )
    except KeyError as exc:
        raise ParseError(f"key file is missing {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ParseError(f"bad key file value: {exc}") from None


def template_fields(code: HashCode) -> list[tuple[str, str]]:
    return [
        ("subject_id", code.subject_id),
        ("n", str(code.n)), ("p", str(code.p)), ("k", str(code.k)),
        ("l", str(code.l)), ("s_key", str(code.s_key)),
        ("params_digest_alg", DIGEST_ALG),
        ("params_digest", code.params_digest),
    ]


def dumps_template(code: HashCode) -> str:
    body = [TEMPLATE_HEADER] + [f"{k}={v}" for k, v in template_fields(code)]
    body.append(",".join(str(c) for c in code.code))
    return "\n".join(body) + "\n"


def parse_template_lines(lines: Sequence[str], first_line: int = 1) -> tuple[HashCode, dict[str, str]]:
    """Parse one template block; returns the code and every key=value field seen."""
    if not lines or lines[0].strip() != TEMPLATE_HEADER:
        raise ParseError(f"missing '{TEMPLATE_HEADER}' header", first_line)
    kv: dict[str, str] = {}
    code_line = None
    for off, line in enumerate(lines[1:], start=first_line + 1):
        if "=" in line:
            k, v = line.split("=", 1)
            kv[k] = v
        elif code_line is None:
            code_line = (off, line)
        else:
            raise ParseError("unexpected second code line", off)
    if code_line is None:
        raise ParseError("template has no code line", first_line)
    try:
        code = tuple(int(c) for c in code_line[1].split(","))
        n, p, k, l, s = (int(kv[f]) for f in ("n", "p", "k", "l", "s_key"))
    except KeyError as exc:
        raise ParseError(f"template is missing {exc.args[0]!r}", first_line) from None
    except ValueError as exc:
        raise ParseError(f"bad template value: {exc}", code_line[0]) from None
    alg = kv.get("params_digest_alg", DIGEST_ALG)
    if alg != DIGEST_ALG:
        raise ParseError(f"unsupported digest algorithm {alg!r}", first_line)
    digest = kv.get("params_digest", "")
    if digest != params_digest(n, p, k, l, s):
        raise IncompatibleTemplateError("params_digest does not match the template's parameters")
    try:
        hc = HashCode(code, digest, kv.get("subject_id", ""), n, p, k, l, s)
    except ValidationError as exc:
        raise ParseError(str(exc), code_line[0]) from None
    return hc, kv


def loads_template(text: str) -> HashCode:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    lines = [ln for ln in lines if not ln.startswith("digest=")]
    return parse_template_lines(lines)[0]


def check_compatible(code: HashCode, key: UserKey) -> None:
    if code.params_digest != key.params_digest():
        raise IncompatibleTemplateError(
            f"template parameters ({code.n=}, {code.k=}, {code.l=}, {code.s_key=}) "
            f"do not match key parameters ({key.shape_string()})"
        )
