"""Header + raw payload files shared by records, datasets and checkpoints.

Layout: UTF-8 ``key=value`` lines, terminated by ``"\\n\\0"``, followed by a
little-endian binary payload.  Keys are written in insertion order so files
are byte-reproducible.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

TERMINATOR = b"\n\0"


class ContainerError(ValueError):
    pass


def encode_header(fields: dict[str, object]) -> bytes:
    lines = []
    for key, value in fields.items():
        text = str(value)
        if "=" in key or "\n" in key or "\n" in text or "\0" in text:
            raise ContainerError(f"unencodable header field {key!r}")
        lines.append(f"{key}={text}")
    return "\n".join(lines).encode("utf-8") + TERMINATOR


def split_header(blob: bytes) -> tuple[dict[str, str], bytes]:
    end = blob.find(TERMINATOR)
    if end < 0:
        raise ContainerError("malformed header: missing terminator")
    try:
        text = blob[:end].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ContainerError("malformed header: not UTF-8") from exc
    fields: dict[str, str] = {}
    for line in text.split("\n"):
        key, sep, value = line.partition("=")
        if not sep or not key:
            raise ContainerError(f"malformed header line {line!r}")
        fields[key] = value
    return fields, blob[end + len(TERMINATOR):]


def require(fields: dict[str, str], *keys: str) -> None:
    missing = [k for k in keys if k not in fields]
    if missing:
        raise ContainerError(f"malformed header: missing {', '.join(missing)}")


def header_int(fields: dict[str, str], key: str) -> int:
    try:
        return int(fields[key])
    except (KeyError, ValueError):
        raise ContainerError(f"malformed header: bad integer field {key!r}") from None


def payload_array(payload: bytes, dtype: str, count: int) -> np.ndarray:
    itemsize = np.dtype(dtype).itemsize
    if len(payload) != count * itemsize:
        raise ContainerError(
            f"truncated payload: expected {count * itemsize} bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=dtype, count=count).copy()


def write_file(path: str | Path, fields: dict[str, object], payload: bytes) -> None:
    Path(path).write_bytes(encode_header(fields) + payload)


def read_file(path: str | Path) -> tuple[dict[str, str], bytes]:
    return split_header(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# named-tensor checkpoints


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write float64 named tensors plus a ``.names`` text manifest next to it."""
    path = Path(path)
    fields: dict[str, object] = {"format": "tensors", "version": 1, "dtype": "<f8",
                                 "count": len(tensors)}
    chunks = []
    for i, (name, arr) in enumerate(tensors.items()):
        arr = np.asarray(arr, dtype="<f8")
        fields[f"t{i}"] = f"{name}:{','.join(str(d) for d in arr.shape)}"
        chunks.append(arr.tobytes(order="C"))
    write_file(path, fields, b"".join(chunks))
    manifest = "".join(f"{name}\t{'x'.join(str(d) for d in np.shape(a)) or 'scalar'}\n"
                       for name, a in tensors.items())
    path.with_name(path.name + ".names").write_text(manifest)


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    fields, payload = read_file(path)
    require(fields, "format", "count")
    if fields["format"] != "tensors":
        raise ContainerError(f"not a tensor file: format={fields['format']}")
    out: dict[str, np.ndarray] = {}
    offset = 0
    for i in range(header_int(fields, "count")):
        name, _, dims = fields[f"t{i}"].rpartition(":")
        shape = tuple(int(d) for d in dims.split(",")) if dims else ()
        n = int(np.prod(shape)) if shape else 1
        chunk = payload[offset:offset + 8 * n]
        out[name] = payload_array(chunk, "<f8", n).reshape(shape)
        offset += 8 * n
    if offset != len(payload):
        raise ContainerError("trailing bytes after last tensor")
    return out
