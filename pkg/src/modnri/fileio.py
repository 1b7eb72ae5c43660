"""Shared helpers for the JSON artifacts: atomic writes, exact float text, errors."""
from __future__ import annotations

import json
import os
import tempfile

import numpy as np

FORMAT_VERSION = 1


class ParseError(ValueError):
    """A file could not be parsed. ``offset`` is the byte position when known."""

    def __init__(self, path, message: str, offset: int | None = None):
        where = f" at byte {offset}" if offset is not None else ""
        super().__init__(f"{path}: {message}{where}")
        self.path = str(path)
        self.offset = offset


class VersionError(ValueError):
    """A file has an unsupported format version or an unknown kind tag."""

    def __init__(self, path, message: str, tag=None):
        super().__init__(f"{path}: {message}")
        self.path = str(path)
        self.tag = tag


def atomic_write(path, data) -> None:
    """Write ``data`` (str or bytes) to a temp file in the target directory, then rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    raw = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_float(x: float) -> str:
    # 17 significant digits round-trip every IEEE-754 double
    s = "%.17g" % x
    # keep a float marker so "-0" is not parsed back as the integer 0
    return s if any(c in s for c in ".en") else s + ".0"


def float_array_json(a: np.ndarray) -> str:
    """Nested JSON array text of ``a`` with 17-digit floats."""
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("cannot serialize non-finite values")
    if a.ndim == 0:
        return format_float(float(a))
    if a.ndim == 1:
        return "[" + ",".join(map(format_float, a.tolist())) + "]"
    return "[" + ",".join(float_array_json(x) for x in a) + "]"


def read_json(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ParseError(path, "not valid UTF-8", e.start) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        offset = len(text[: e.pos].encode("utf-8"))
        raise ParseError(path, e.msg, offset) from None
    if not isinstance(doc, dict):
        raise ParseError(path, "top-level value must be an object", 0)
    return doc


def check_version(path, doc: dict) -> None:
    v = doc.get("format_version")
    if v != FORMAT_VERSION:
        raise VersionError(path, f"unsupported format_version {v!r} (expected {FORMAT_VERSION})", v)


def require(path, doc: dict, key: str):
    if key not in doc:
        raise ParseError(path, f"missing field {key!r}")
    return doc[key]
