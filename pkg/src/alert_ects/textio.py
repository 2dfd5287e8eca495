"""Line-oriented, versioned text format shared by chain, policy and network dumps.

Every line is ``key value...``; matrices are written as ``key rows cols``
followed by ``rows`` lines of numbers. Floats use 17 significant digits so
reading back reproduces the exact doubles.
"""

from __future__ import annotations

import numpy as np

from .core import DataError


def fmt(v) -> str:
    return f"{float(v):.17g}"


class TextWriter:
    def __init__(self, kind: str, version: int = 1):
        self.lines = [f"{kind} {version}"]

    def scalar(self, key: str, value) -> "TextWriter":
        if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
            self.lines.append(f"{key} {int(value)}")
        elif isinstance(value, str):
            self.lines.append(f"{key} {value}")
        else:
            self.lines.append(f"{key} {fmt(value)}")
        return self

    def vector(self, key: str, values) -> "TextWriter":
        vals = np.asarray(values).ravel()
        kind = "i" if np.issubdtype(vals.dtype, np.integer) else "f"
        body = " ".join(str(int(v)) if kind == "i" else fmt(v) for v in vals)
        self.lines.append(f"{key} {kind} {len(vals)} {body}".rstrip())
        return self

    def matrix(self, key: str, values) -> "TextWriter":
        m = np.atleast_2d(np.asarray(values, dtype=np.float64))
        self.lines.append(f"{key} {m.shape[0]} {m.shape[1]}")
        self.lines.extend(" ".join(fmt(v) for v in row) for row in m)
        return self

    def text(self) -> str:
        return "\n".join(self.lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.text())


class TextReader:
    def __init__(self, text: str, kind: str, max_version: int = 1):
        self._lines = [ln for ln in text.splitlines() if ln.strip()]
        self._pos = 0
        head = self._next().split()
        if len(head) != 2 or head[0] != kind:
            raise DataError(f"expected a '{kind}' file, found header {' '.join(head)!r}")
        self.version = int(head[1])
        if self.version > max_version:
            raise DataError(f"unsupported {kind} version {self.version}")

    @classmethod
    def open(cls, path, kind: str, max_version: int = 1) -> "TextReader":
        with open(path) as fh:
            return cls(fh.read(), kind, max_version)

    def _next(self) -> str:
        if self._pos >= len(self._lines):
            raise DataError("unexpected end of file")
        line = self._lines[self._pos]
        self._pos += 1
        return line

    def _expect(self, key: str) -> list[str]:
        parts = self._next().split()
        if not parts or parts[0] != key:
            raise DataError(f"line {self._pos + 1}: expected '{key}', found {parts[:1]}")
        return parts[1:]

    def peek_key(self) -> str | None:
        if self._pos >= len(self._lines):
            return None
        return self._lines[self._pos].split()[0]

    def scalar(self, key: str, cast=float):
        return cast(" ".join(self._expect(key)))

    def vector(self, key: str) -> np.ndarray:
        parts = self._expect(key)
        kind, n = parts[0], int(parts[1])
        vals = parts[2:]
        if len(vals) != n:
            raise DataError(f"'{key}': expected {n} values, found {len(vals)}")
        if kind == "i":
            return np.array([int(v) for v in vals], dtype=np.int64)
        return np.array([float(v) for v in vals], dtype=np.float64)

    def matrix(self, key: str) -> np.ndarray:
        rows, cols = (int(v) for v in self._expect(key))
        out = np.empty((rows, cols))
        for i in range(rows):
            cells = self._next().split()
            if len(cells) != cols:
                raise DataError(f"'{key}' row {i}: expected {cols} values")
            out[i] = [float(c) for c in cells]
        return out
