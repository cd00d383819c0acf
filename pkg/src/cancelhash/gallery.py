"""Training gallery stored next to a KPCA model.

A query's feature vector needs its similarities to every training sample, so
the CLI keeps the training minutiae and descriptor parameters in a companion
``CFHG v1`` file::

    CFHG v1
    radius=70
    ...
    samples=2

    [1_1]
    10.5 20.25 0.5
    ...
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .descriptor import (
    DescriptorParams,
    DescriptorSet,
    MinutiaeSet,
    build_descriptor,
    format_minutiae,
    parse_minutiae,
    similarities_to,
)
from .errors import ParseError, ValidationError

GALLERY_HEADER = "CFHG v1"


@dataclass(frozen=True)
class Gallery:
    params: DescriptorParams
    samples: tuple[MinutiaeSet, ...]

    def __post_init__(self):
        if not self.samples:
            raise ValidationError("gallery is empty")
        for s in self.samples:
            if not s.source_id or any(c in s.source_id for c in ",[]\n"):
                raise ValidationError(f"gallery label {s.source_id!r} is empty or contains ',', '[', ']'")

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(s.source_id for s in self.samples)

    def descriptors(self) -> list[DescriptorSet]:
        return [build_descriptor(s, self.params) for s in self.samples]

    def similarities(self, query: MinutiaeSet, descriptors: Sequence[DescriptorSet] | None = None) -> np.ndarray:
        descriptors = descriptors if descriptors is not None else self.descriptors()
        return similarities_to(build_descriptor(query, self.params), descriptors)


def dumps_gallery(gallery: Gallery) -> str:
    p = gallery.params
    lines = [
        GALLERY_HEADER,
        f"radius={p.radius!r}",
        f"grid={p.grid}",
        f"angular_bins={p.angular_bins}",
        f"sigma_s={p.spatial_sigma!r}",
        f"sigma_a={p.sigma_a!r}",
        f"samples={len(gallery.samples)}",
    ]
    for s in gallery.samples:
        lines += ["", f"[{s.source_id}]", format_minutiae(s).rstrip("\n")]
    return "\n".join(lines) + "\n"


def loads_gallery(text: str) -> Gallery:
    lines = text.split("\n")
    if not lines or lines[0].strip() != GALLERY_HEADER:
        raise ParseError(f"missing '{GALLERY_HEADER}' header", 1)
    kv = {}
    idx = 1
    while idx < len(lines) and lines[idx].strip():
        if "=" not in lines[idx]:
            raise ParseError("expected key=value", idx + 1)
        key, value = lines[idx].split("=", 1)
        kv[key.strip()] = value.strip()
        idx += 1
    try:
        params = DescriptorParams(
            radius=float(kv["radius"]), grid=int(kv["grid"]), angular_bins=int(kv["angular_bins"]),
            sigma_s=float(kv["sigma_s"]), sigma_a=float(kv["sigma_a"]),
        )
        expected = int(kv["samples"])
    except KeyError as exc:
        raise ParseError(f"gallery header lacks {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ParseError(f"bad gallery header value: {exc}") from None

    samples = []
    label, start, body = None, 0, []

    def flush():
        if label is not None:
            try:
                samples.append(parse_minutiae("\n".join(body), label))
            except ParseError as exc:
                line = start + exc.line - 1 if exc.line else None
                raise ParseError(f"sample [{label}]: {exc.detail}", line) from None

    for no, line in enumerate(lines[idx:], start=idx + 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            flush()
            label, start, body = s[1:-1], no + 1, []
        elif label is not None:
            body.append(line)
        elif s:
            raise ParseError("minutiae line before any [label]", no)
    flush()
    if len(samples) != expected:
        raise ParseError(f"gallery declares {expected} samples but holds {len(samples)}")
    return Gallery(params, tuple(samples))


def gallery_path(model_path) -> Path:
    p = Path(model_path)
    return p.with_name(p.name + ".gallery")
