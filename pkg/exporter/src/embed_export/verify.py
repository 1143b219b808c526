"""Independent FSB1 integrity check (deliberately not sharing parser code)."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import VerifyError

_HEADER = struct.Struct("<4sIII")


def verify_file(path) -> dict:
    """Re-parse an FSB1 file and report shape, label histogram, NaN count."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != b"FSB1":
        raise VerifyError("bad magic", 0)
    if len(raw) < _HEADER.size:
        raise VerifyError("truncated header", len(raw))
    _, n, d, c = _HEADER.unpack_from(raw, 0)
    feat_off = _HEADER.size
    label_off = feat_off + 4 * n * d
    expected = label_off + 4 * n
    if len(raw) < expected:
        raise VerifyError(f"truncated payload, expected {expected} bytes", len(raw))
    if len(raw) > expected:
        raise VerifyError("trailing bytes", expected)

    features = np.frombuffer(raw, dtype="<f4", count=n * d, offset=feat_off)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=label_off)
    if labels.size and labels.max() >= c:
        first = int(np.argmax(labels >= c))
        raise VerifyError(f"label >= c at sample {first}", label_off + 4 * first)

    histogram = np.bincount(labels.astype(np.int64), minlength=c)
    return {
        "n": int(n),
        "d": int(d),
        "c": int(c),
        "label_histogram": histogram.tolist(),
        "nan_count": int(np.count_nonzero(~np.isfinite(features))),
    }
