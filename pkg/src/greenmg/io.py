"""Binary containers for datasets, checkpoints and exported kernels.

Layout: one line of UTF-8 JSON (the header, newline terminated) followed by a
raw little-endian float64 payload.  The header lists the payload blocks in
order as ``[{"name": ..., "shape": [...]}, ...]`` under the key ``blocks``;
arrays are stored row-major.  Writes go to a temporary file in the target
directory and are renamed into place.
"""

import json
import os
import tempfile

import numpy as np

FORMAT_VERSION = 1


def atomic_write_bytes(path, chunks):
    """Write an iterable of bytes-like chunks to ``path`` atomically."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            for chunk in chunks:
                fh.write(chunk)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, [text.encode("utf-8")])


def write_container(path, header, blocks):
    """Write ``header`` plus named float64 arrays (an ordered mapping)."""
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header["blocks"] = [{"name": name, "shape": list(np.shape(arr))} for name, arr in blocks.items()]
    line = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    payload = [np.ascontiguousarray(arr, dtype="<f8").tobytes() for arr in blocks.values()]
    atomic_write_bytes(path, [line, *payload])


def read_container(path):
    """Return ``(header, {name: array})`` from a file written by ``write_container``."""
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise OSError(f"{path}: not a greenmg container ({exc})") from exc
        if header.get("format_version") != FORMAT_VERSION:
            raise OSError(f"{path}: unsupported format version {header.get('format_version')}")
        data = fh.read()
    blocks = {}
    offset = 0
    for spec in header["blocks"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        end = offset + 8 * count
        if end > len(data):
            raise OSError(f"{path}: truncated payload in block {spec['name']!r}")
        blocks[spec["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(spec["shape"]).copy()
        offset = end
    if offset != len(data):
        raise OSError(f"{path}: {len(data) - offset} trailing bytes after payload")
    return header, blocks
