"""On-disk artifacts: deterministic .npz archives, atomic writes, JSONL.

numpy's ``savez`` stamps zip entries with the current time, so two otherwise
identical saves differ byte for byte.  ``dumps_npz`` writes entries in sorted
order with a fixed timestamp instead; the result is still a regular .npz that
``np.load`` reads.  All file writes here go through a same-directory temp
file and ``os.replace`` so readers never see a half-written artifact.
"""
from __future__ import annotations

import io
import json
import os
import tempfile
import zipfile
from typing import Dict, Iterable, List

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)


def dumps_npz(arrays: Dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for name in sorted(arrays):
            payload = io.BytesIO()
            np.lib.format.write_array(payload, np.asarray(arrays[name]),
                                      allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, payload.getvalue())
    return buf.getvalue()


def save_npz(path: str, arrays: Dict[str, np.ndarray]) -> None:
    write_atomic(path, dumps_npz(arrays))


def load_npz(path: str) -> Dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as data:
        return {k: data[k] for k in data.files}


def dumps_jsonl(records: Iterable[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def load_jsonl(path: str) -> List[dict]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def write_atomic(path: str, data) -> None:
    """Write bytes or text to ``path`` via a temp file in the same directory."""
    binary = isinstance(data, (bytes, bytearray))
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        if binary:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
        else:
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
