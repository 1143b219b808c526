"""Run a frozen backbone over a dataset and write an FSB1 feature file.

FSB1 bytes: magic ``FSB1``, little-endian u32 n/d/c, n*d float32 features
row-major, n u32 labels. A ``<stem>.manifest.json`` sidecar records the
dataset, backbone, split, preprocessing note and creation time.
"""

from __future__ import annotations

import datetime
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .backbones import load_backbone
from .datasets import open_dataset
from .errors import ExportError


@dataclass
class ExportJob:
    dataset: str
    split: str
    backbone: str
    out: str
    batch_size: int = 32
    device: str = "cpu"
    l2_normalize: bool = False

    def validate(self) -> "ExportJob":
        if self.batch_size < 1:
            raise ExportError("batch_size must be >= 1")
        out_dir = Path(self.out).resolve().parent
        if not out_dir.is_dir():
            raise ExportError(f"output directory does not exist: {out_dir}")
        return self


def write_fsb1(path, features: np.ndarray, labels: np.ndarray) -> None:
    n, d = features.shape
    c = int(labels.max()) + 1
    payload = bytearray()
    payload += struct.pack("<4sIII", b"FSB1", n, d, c)
    payload += features.astype("<f4").tobytes(order="C")
    payload += labels.astype("<u4").tobytes(order="C")
    Path(path).write_bytes(bytes(payload))


def export_features(job: ExportJob) -> dict:
    """Embed every image of the split and write FSB1 + manifest.

    Labels are remapped to the contiguous ids of the classes actually
    present, so every class in the file has at least one sample.
    """
    job.validate()
    source = open_dataset(job.dataset, job.split)
    backbone = load_backbone(job.backbone)
    device = torch.device(job.device)
    backbone.module.to(device)

    chunks: list[np.ndarray] = []
    labels: list[int] = []
    batch: list[torch.Tensor] = []

    def flush():
        if not batch:
            return
        stacked = torch.stack(batch).to(device)
        chunks.append(backbone.embed(stacked).cpu().numpy())
        batch.clear()

    for image, label in source:
        batch.append(backbone.preprocess(image))
        labels.append(label)
        if len(batch) == job.batch_size:
            flush()
    flush()
    if not labels:
        raise ExportError("dataset produced no images")

    features = np.concatenate(chunks, axis=0).astype(np.float64)
    if not np.all(np.isfinite(features)):
        raise ExportError("backbone produced non-finite activations")
    if job.l2_normalize:
        norms = np.linalg.norm(features, axis=1, keepdims=True)
        features = features / np.where(norms == 0.0, 1.0, norms)

    raw = np.asarray(labels, dtype=np.int64)
    present = np.unique(raw)
    remap = {int(old): new for new, old in enumerate(present)}
    mapped = np.asarray([remap[int(v)] for v in raw], dtype=np.int64)

    write_fsb1(job.out, features, mapped)
    manifest = {
        "source": source.name,
        "split": job.split,
        "backbone": job.backbone,
        "embedding": backbone.note,
        "embedding_width": backbone.width,
        "l2_normalized": job.l2_normalize,
        "classes": [source.classes[int(old)] for old in present],
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    sidecar = Path(job.out).with_suffix("").with_suffix(".manifest.json")
    sidecar.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return {
        "out": str(job.out),
        "manifest": str(sidecar),
        "n": len(mapped),
        "d": features.shape[1],
        "c": len(present),
    }
