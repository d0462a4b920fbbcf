"""Line-delimited record files with a leading header, atomic writes and hashing."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping

SCHEMA_VERSION = "1"
HEADER_KEY = "_header"


class ProvenanceError(RuntimeError):
    """An input hash recorded in a header does not match the file on disk."""


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_hash(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def make_header(kind: str, inputs: Mapping[str, str | os.PathLike] | None = None, **meta) -> dict:
    """Header record; ``inputs`` maps a role name to a file whose hash is embedded."""
    header = {"kind": kind, "schema_version": SCHEMA_VERSION}
    if inputs:
        header["inputs"] = {
            role: {"path": Path(p).name, "sha256": file_hash(p)} for role, p in sorted(inputs.items())
        }
    header.update(meta)
    return header


def write_records(path, records: Iterable[Mapping], header: Mapping | None = None) -> None:
    lines = []
    if header is not None:
        lines.append(canonical_json({HEADER_KEY: header}))
    lines.extend(canonical_json(r) for r in records)
    atomic_write_text(path, "".join(line + "\n" for line in lines))


def iter_lines(path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed record: {exc.msg}") from None


def read_records(path) -> tuple[dict | None, list[dict]]:
    """Return ``(header, records)``; header is None when the file has none."""
    header = None
    records = []
    for lineno, obj in iter_lines(path):
        if HEADER_KEY in obj:
            if lineno != 1 and header is None and records:
                raise ValueError(f"{path}:{lineno}: header must be the first record")
            header = obj[HEADER_KEY]
        else:
            records.append(obj)
    return header, records


def append_record(path, record: Mapping) -> None:
    """Append one line; used by resumable collectors that must survive interruption."""
    with open(path, "a", encoding="utf-8") as f:
        f.write(canonical_json(record) + "\n")
        f.flush()
        os.fsync(f.fileno())


def write_json(path, obj: Any) -> None:
    atomic_write_text(path, json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n")


def read_json(path) -> Any:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def verify_inputs(header: Mapping | None, files: Mapping[str, str | os.PathLike]) -> None:
    """Check that the hashes recorded in ``header`` match ``files`` (role -> path)."""
    recorded = (header or {}).get("inputs", {})
    for role, path in files.items():
        if role not in recorded:
            continue
        actual = file_hash(path)
        if recorded[role]["sha256"] != actual:
            raise ProvenanceError(
                f"{role}: {Path(path).name} changed since it was consumed "
                f"(recorded {recorded[role]['sha256'][:12]}, found {actual[:12]})"
            )
