"""Feature-set interchange (FSB1) and synthetic dataset generation.

FSB1 layout, all little-endian:

    bytes 0..3   ASCII magic ``FSB1``
    bytes 4..15  u32 n, u32 d, u32 c
    then         n*d IEEE-754 float32 features, row-major
    then         n u32 labels in [0, c)

An optional JSON sidecar ``<stem>.manifest.json`` records provenance
(``source``, ``backbone``, ``split``, ``created``).

The synthetic generator uses numpy's PCG64 generator, which is a named,
seedable algorithm with stable cross-platform streams, so a (spec, seed)
pair reproduces the same dataset everywhere.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError

_MAGIC = b"FSB1"
_HEADER = struct.Struct("<4sIII")


@dataclass
class FeatureSet:
    """An n-by-d embedding matrix with integer labels in [0, c)."""

    n: int
    d: int
    c: int
    features: np.ndarray  # float64 in memory; float32 on disk
    labels: np.ndarray  # int64

    def validate(self) -> "FeatureSet":
        if self.n <= 0:
            raise ContractError("FeatureSet requires n > 0")
        if self.features.shape != (self.n, self.d):
            raise ContractError(
                f"features shape {self.features.shape} != ({self.n}, {self.d})"
            )
        if self.labels.shape != (self.n,):
            raise ContractError(f"labels shape {self.labels.shape} != ({self.n},)")
        if not np.all(np.isfinite(self.features)):
            raise ContractError("features contain NaN/Inf")
        if self.labels.min() < 0 or self.labels.max() >= self.c:
            raise ContractError("labels must lie in [0, c)")
        present = np.bincount(self.labels, minlength=self.c)
        if np.any(present == 0):
            missing = int(np.argmin(present))
            raise ContractError(f"class {missing} has no samples")
        return self

    def subset(self, indices: np.ndarray) -> "FeatureSet":
        """Reindexed view of a sample subset (classes kept as-is)."""
        idx = np.asarray(indices, dtype=np.intp)
        return FeatureSet(
            n=len(idx),
            d=self.d,
            c=self.c,
            features=self.features[idx],
            labels=self.labels[idx],
        )


@dataclass
class SynthSpec:
    """Recipe for a multi-mode Gaussian dataset with controllable overlap.

    Classes sit on a scaled simplex (orthogonal axes while the dimension
    lasts). A class's second mode is placed antipodally, so classes are
    genuinely multi-modal in a way linear decision rules cannot fold.

    ``overlap`` acts on designated cross-class mode pairs (classes paired off
    0-1, 2-3, ...): each designated mode sends a small overlap-scaled sample
    count into a tight shared cloud at the pair midpoint, which guarantees
    cross-class sample pairs closer than ``mode_spread`` regardless of
    dimension and provides mixed-cluster material.
    """

    classes: int
    modes_per_class: int
    d: int
    samples_per_mode: int
    mode_spread: float = 0.25
    overlap: float = 0.0
    seed: int = 0

    def validate(self) -> "SynthSpec":
        if self.classes < 1 or self.modes_per_class < 1 or self.d < 1:
            raise ContractError("classes, modes_per_class and d must be >= 1")
        if self.samples_per_mode < 1:
            raise ContractError("samples_per_mode must be >= 1")
        if not (0.0 <= self.overlap < 1.0):
            raise ContractError("overlap must lie in [0, 1)")
        if self.mode_spread <= 0.0:
            raise ContractError("mode_spread must be positive")
        return self


def save_featureset(fs: FeatureSet, path, manifest: dict | None = None) -> None:
    """Write ``fs`` in FSB1 form; ``load_featureset`` round-trips it exactly."""
    fs.validate()
    path = Path(path)
    payload = bytearray()
    payload += _HEADER.pack(_MAGIC, fs.n, fs.d, fs.c)
    payload += fs.features.astype("<f4").tobytes(order="C")
    payload += fs.labels.astype("<u4").tobytes(order="C")
    path.write_bytes(bytes(payload))
    if manifest is not None:
        sidecar = path.with_suffix("").with_suffix(".manifest.json")
        sidecar.write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_featureset(path) -> FeatureSet:
    """Parse an FSB1 file, validating invariants; errors carry byte offsets."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != _MAGIC:
        raise FormatError("bad magic, expected 'FSB1'", 0)
    if len(raw) < _HEADER.size:
        raise FormatError("truncated header", len(raw))
    _, n, d, c = _HEADER.unpack_from(raw, 0)
    if n == 0:
        raise FormatError("sample count n must be > 0", 4)
    if d == 0:
        raise FormatError("feature dimension d must be > 0", 8)
    if c == 0:
        raise FormatError("class count c must be > 0", 12)

    feat_off = _HEADER.size
    feat_bytes = n * d * 4
    label_off = feat_off + feat_bytes
    expected = label_off + n * 4
    if len(raw) < expected:
        raise FormatError(
            f"truncated payload, expected {expected} bytes", len(raw)
        )
    if len(raw) > expected:
        raise FormatError("trailing bytes after payload", expected)

    features32 = np.frombuffer(raw, dtype="<f4", count=n * d, offset=feat_off)
    bad = ~np.isfinite(features32)
    if bad.any():
        first = int(np.argmax(bad))
        raise FormatError("non-finite feature value", feat_off + 4 * first)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=label_off)
    over = labels >= c
    if over.any():
        first = int(np.argmax(over))
        raise FormatError(f"label >= c at sample {first}", label_off + 4 * first)
    present = np.bincount(labels.astype(np.int64), minlength=c)
    if np.any(present == 0):
        missing = int(np.argmin(present))
        raise FormatError(f"class {missing} has no samples", label_off)

    return FeatureSet(
        n=int(n),
        d=int(d),
        c=int(c),
        features=features32.astype(np.float64).reshape(n, d),
        labels=labels.astype(np.int64),
    )


def load_manifest(path) -> dict | None:
    sidecar = Path(path).with_suffix("").with_suffix(".manifest.json")
    if not sidecar.exists():
        return None
    return json.loads(sidecar.read_text())


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def _class_centers(spec: SynthSpec, rng: np.random.Generator, sep: float) -> np.ndarray:
    """Class anchors on a scaled simplex: basis vectors while they last,
    then random unit directions for classes beyond the dimension."""
    centers = np.zeros((spec.classes, spec.d))
    for j in range(spec.classes):
        if j < spec.d:
            centers[j, j] = sep
        else:
            v = rng.standard_normal(spec.d)
            centers[j] = sep * v / np.linalg.norm(v)
    return centers


def generate_synthetic(spec: SynthSpec) -> FeatureSet:
    """Draw the dataset described by ``spec`` (deterministic per seed).

    Mode 0 of class j sits at the class center, mode 1 exactly antipodal
    across the origin (structural intra-class diversity, with no per-class
    direction a linear rule could learn around), further modes in random
    directions at the same radius; every mode is an isotropic Gaussian with
    per-coordinate std ``mode_spread``. When ``overlap`` > 0, the last mode
    of each paired class is designated: an overlap-scaled handful of its
    samples is drawn from a tight cloud at the pair midpoint, so cross-class
    pairs closer than ``mode_spread`` exist at any dimension.
    """
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    s = spec.mode_spread
    # Cloud radius scales with sqrt(d); keep inter-cloud gaps a fixed multiple
    # of it so the cluster structure survives the documented vigilance sweep.
    sep = 7.5 * s * np.sqrt(spec.d)
    centers = _class_centers(spec, rng, sep)

    mode_centers = np.zeros((spec.classes, spec.modes_per_class, spec.d))
    for j in range(spec.classes):
        mode_centers[j, 0] = centers[j]
        for k in range(1, spec.modes_per_class):
            if k == 1:
                mode_centers[j, k] = -centers[j]
            else:
                v = rng.standard_normal(spec.d)
                mode_centers[j, k] = sep * v / np.linalg.norm(v) + 0.5 * s * rng.standard_normal(spec.d)

    # Overlap: disjoint class pairs, last mode of each side designated. The
    # designated mode donates a minimal overlap-scaled handful of samples to
    # the shared midpoint cloud (and thereby stays smaller than mode 0, which
    # keeps the class's largest dominated cluster deterministic).
    midpoint: dict[tuple[int, int], np.ndarray] = {}
    spm = spec.samples_per_mode
    n_mid = 0
    if spec.overlap > 0.0 and spec.classes >= 2:
        k = spec.modes_per_class - 1
        n_mid = min(int(np.ceil(0.02 * spec.overlap * spm)), spm)
        for a in range(0, spec.classes - 1, 2):
            b = a + 1
            mid = 0.5 * (mode_centers[a, k] + mode_centers[b, k])
            midpoint[(a, k)] = mid
            midpoint[(b, k)] = mid

    mid_std = s / (2.0 * np.sqrt(spec.d))
    rows = []
    labels = []
    for j in range(spec.classes):
        for k in range(spec.modes_per_class):
            block = mode_centers[j, k] + s * rng.standard_normal((spm, spec.d))
            if (j, k) in midpoint and n_mid > 0:
                mid = midpoint[(j, k)]
                block[:n_mid] = mid + mid_std * rng.standard_normal((n_mid, spec.d))
            rows.append(block)
            labels.append(np.full(spm, j, dtype=np.int64))

    features = np.concatenate(rows, axis=0)
    label_arr = np.concatenate(labels)
    order = rng.permutation(len(label_arr))
    features = features[order]
    label_arr = label_arr[order]

    # Round through float32 now so that a save/load cycle is an exact identity.
    features = features.astype(np.float32).astype(np.float64)
    return FeatureSet(
        n=len(label_arr),
        d=spec.d,
        c=spec.classes,
        features=features,
        labels=label_arr,
    ).validate()
