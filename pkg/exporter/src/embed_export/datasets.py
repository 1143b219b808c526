"""Dataset access behind a small allow-list.

``folder:<root>`` reads an image-folder tree ``<root>/<split>/<class>/*``;
``cifar10`` downloads through torchvision (needs network access). Iteration
order is sorted and therefore stable across runs.
"""

from __future__ import annotations

from pathlib import Path

from PIL import Image

from .errors import ExportError

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}

ALLOWED_DATASETS = ("folder:<root>", "cifar10")


class ImageSource:
    """A finite, ordered collection of (PIL image, class index) pairs."""

    def __init__(self, name: str, classes: list[str], items):
        self.name = name
        self.classes = classes
        self._items = items  # list of (loader, class index)

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        for loader, label in self._items:
            yield loader(), label


def _folder_source(root: Path, split: str) -> ImageSource:
    base = root / split
    if not base.is_dir():
        raise ExportError(f"dataset split directory not found: {base}")
    classes = sorted(p.name for p in base.iterdir() if p.is_dir())
    if not classes:
        raise ExportError(f"no class subdirectories under {base}")
    items = []
    for idx, cls in enumerate(classes):
        files = sorted(
            p for p in (base / cls).iterdir() if p.suffix.lower() in _IMAGE_SUFFIXES
        )
        if not files:
            raise ExportError(f"class directory {base / cls} holds no images")
        for path in files:
            items.append((lambda p=path: Image.open(p).convert("RGB"), idx))
    return ImageSource(f"folder:{root}", classes, items)


def _cifar10_source(split: str) -> ImageSource:
    try:
        from torchvision.datasets import CIFAR10

        data = CIFAR10(root="./cifar10-data", train=(split == "train"), download=True)
    except Exception as exc:
        raise ExportError(f"could not obtain cifar10: {exc}") from exc
    items = [
        (lambda i=i: data[i][0].convert("RGB"), int(data.targets[i]))
        for i in range(len(data))
    ]
    return ImageSource("cifar10", list(data.classes), items)


def open_dataset(name: str, split: str) -> ImageSource:
    if split not in ("train", "test"):
        raise ExportError(f"split must be 'train' or 'test', got {split!r}")
    if name.startswith("folder:"):
        return _folder_source(Path(name.split(":", 1)[1]), split)
    if name == "cifar10":
        return _cifar10_source(split)
    raise ExportError(
        f"unknown dataset {name!r}; allowed: {', '.join(ALLOWED_DATASETS)}"
    )
