"""Append-only template store with per-record integrity digests.

The store file is a sequence of ``CFHT v1`` blocks separated by blank lines.
Each block ends with ``digest=<sha256>`` over the block's preceding lines.
Revocation appends a copy of the record with ``status=revoked``; the latest
block for a ``record_id`` wins. Key material never enters the store, only
the key's identifier.
"""

from __future__ import annotations

import fcntl
import hashlib
import os
from contextlib import contextmanager
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

from .errors import (
    ConflictError,
    IncompatibleTemplateError,
    IntegrityError,
    NotFoundError,
    ParseError,
    StorageError,
)
from .hashing import TEMPLATE_HEADER, HashCode, parse_template_lines, template_fields
from .matching import MatchScore, similarity

ACTIVE = "active"
REVOKED = "revoked"
DEFAULT_APP = "default"


def utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class TemplateRecord:
    subject_id: str
    code: HashCode
    created_at: str
    key_id: str
    application_id: str = DEFAULT_APP
    status: str = ACTIVE
    record_id: str = ""

    def __post_init__(self):
        if self.status not in (ACTIVE, REVOKED):
            raise StorageError(f"unknown record status {self.status!r}")
        for name in ("subject_id", "application_id", "key_id", "created_at"):
            value = getattr(self, name)
            if "\n" in value or "\r" in value:
                raise StorageError(f"{name} may not contain line breaks")
        if not self.record_id:
            object.__setattr__(self, "record_id", self._derive_id())

    def _derive_id(self) -> str:
        material = "\x1f".join([
            self.subject_id, self.application_id, self.created_at, self.key_id,
            self.code.params_digest, ",".join(map(str, self.code.code)),
        ])
        return hashlib.sha256(material.encode("utf-8")).hexdigest()[:16]

    @property
    def active(self) -> bool:
        return self.status == ACTIVE


def serialize_record(record: TemplateRecord) -> str:
    lines = [
        TEMPLATE_HEADER,
        f"record_id={record.record_id}",
        f"application_id={record.application_id}",
        f"created_at={record.created_at}",
        f"key_id={record.key_id}",
        f"status={record.status}",
    ]
    code = replace(record.code, subject_id=record.subject_id)
    lines += [f"{k}={v}" for k, v in template_fields(code)]
    lines.append(",".join(str(c) for c in code.code))
    body = "\n".join(lines) + "\n"
    return body + f"digest={_digest(body)}\n"


def _digest(body: str) -> str:
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


def parse_block(block: str, first_line: int = 1) -> TemplateRecord:
    lines = block.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[-1].startswith("digest="):
        raise IntegrityError(f"record at line {first_line} has no trailing digest line")
    body = "\n".join(lines[:-1]) + "\n"
    expected = lines[-1][len("digest="):]
    actual = _digest(body)
    if actual != expected:
        raise IntegrityError(
            f"digest mismatch for record at line {first_line}: stored {expected}, computed {actual}"
        )
    try:
        code, kv = parse_template_lines(lines[:-1], first_line)
    except (ParseError, IncompatibleTemplateError) as exc:
        raise IntegrityError(f"corrupt record at line {first_line}: {exc}") from None
    try:
        return TemplateRecord(
            subject_id=kv.get("subject_id", ""),
            code=code,
            created_at=kv["created_at"],
            key_id=kv["key_id"],
            application_id=kv["application_id"],
            status=kv["status"],
            record_id=kv["record_id"],
        )
    except KeyError as exc:
        raise IntegrityError(f"record at line {first_line} lacks {exc.args[0]!r}") from None


def _split_blocks(text: str):
    """Yield ``(first_line, block_text)`` for every blank-line separated block."""
    line_no, start, current = 1, 1, []
    for line in text.split("\n"):
        if line.strip():
            if not current:
                start = line_no
            current.append(line)
        elif current:
            yield start, "\n".join(current) + "\n"
            current = []
        line_no += 1
    if current:
        yield start, "\n".join(current) + "\n"


@contextmanager
def _locked(path: Path, mode: str, lock: int):
    try:
        fh = open(path, mode, encoding="utf-8", newline="")
    except OSError as exc:
        raise StorageError(f"cannot open store {path}: {exc}") from None
    try:
        fcntl.flock(fh.fileno(), lock)
        yield fh
    finally:
        fcntl.flock(fh.fileno(), fcntl.LOCK_UN)
        fh.close()


class TemplateStore:
    """A single store file; one writer at a time, readers take a shared lock."""

    def __init__(self, path):
        self.path = Path(path)

    def _read_text(self) -> str:
        if not self.path.exists():
            raise StorageError(f"store file {self.path} does not exist")
        with _locked(self.path, "r", fcntl.LOCK_SH) as fh:
            return fh.read()

    @staticmethod
    def _fold(text: str) -> dict[str, TemplateRecord]:
        latest: dict[str, TemplateRecord] = {}
        for first_line, block in _split_blocks(text):
            rec = parse_block(block, first_line)
            latest[rec.record_id] = rec
        return latest

    def records(self) -> list[TemplateRecord]:
        """Current state of every record, in order of first appearance."""
        return list(self._fold(self._read_text()).values())

    def raw_blocks(self) -> list[str]:
        return [b for _, b in _split_blocks(self._read_text())]

    @staticmethod
    def _active(records, subject_id: str, application_id: str):
        return [r for r in records if r.subject_id == subject_id
                and r.application_id == application_id and r.active]

    def _append(self, build) -> str:
        """Read, validate and append under one exclusive lock.

        ``build`` receives the current records and returns the block to append
        (or raises to abort).
        """
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with _locked(self.path, "a+", fcntl.LOCK_EX) as fh:
            fh.seek(0)
            text = fh.read()
            block = build(list(self._fold(text).values()))
            try:
                fh.write(("\n" if text else "") + block)
                fh.flush()
                os.fsync(fh.fileno())
            except OSError as exc:
                raise StorageError(f"write to {self.path} failed: {exc}") from None
        return block

    def save_template(self, record: TemplateRecord) -> None:
        if not record.active:
            raise StorageError("only active records can be saved; use revoke()")

        def build(records):
            if self._active(records, record.subject_id, record.application_id):
                raise ConflictError(
                    f"subject {record.subject_id!r} already has an active template "
                    f"for application {record.application_id!r}; revoke it first"
                )
            if any(r.record_id == record.record_id for r in records):
                raise ConflictError(f"record {record.record_id} already exists")
            return serialize_record(record)

        self._append(build)

    def revoke(self, subject_id: str, application_id: str = DEFAULT_APP) -> TemplateRecord:
        if not self.path.exists():
            raise NotFoundError(f"no active template for subject {subject_id!r}")
        revoked = []

        def build(records):
            active = self._active(records, subject_id, application_id)
            if not active:
                raise NotFoundError(f"no active template for subject {subject_id!r}")
            revoked.append(replace(active[0], status=REVOKED))
            return serialize_record(revoked[0])

        self._append(build)
        return revoked[0]

    def load_template(self, subject_id: str, application_id: str = DEFAULT_APP) -> TemplateRecord:
        active = self._active(self.records(), subject_id, application_id)
        if not active:
            raise NotFoundError(f"no active template for subject {subject_id!r}")
        return active[0]

    def history(self, subject_id: str, application_id: str = DEFAULT_APP) -> list[TemplateRecord]:
        return [r for r in self.records()
                if r.subject_id == subject_id and r.application_id == application_id]


def verify_against(record: TemplateRecord, query: HashCode) -> MatchScore:
    """Score a query against a stored record; revoked records never match."""
    if not record.active:
        raise IncompatibleTemplateError(f"template {record.record_id} has been revoked")
    return similarity(record.code, query)


def save_template(record: TemplateRecord, store_path) -> None:
    TemplateStore(store_path).save_template(record)


def revoke(subject_id: str, store_path, application_id: str = DEFAULT_APP) -> TemplateRecord:
    return TemplateStore(store_path).revoke(subject_id, application_id)


def load_template(subject_id: str, store_path, application_id: str = DEFAULT_APP) -> TemplateRecord:
    return TemplateStore(store_path).load_template(subject_id, application_id)
