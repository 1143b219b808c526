import numpy as np
import pytest
from PIL import Image


def _texture(rng, kind: str) -> Image.Image:
    """Small class-distinct RGB textures (stripes / blobs / checks / noise)."""
    h = w = 48
    img = np.zeros((h, w, 3), dtype=np.float64)
    if kind == "stripes":
        phase = rng.uniform(0, np.pi)
        rows = np.sin(np.arange(h)[:, None] * 0.9 + phase)
        img[..., 0] = 0.5 + 0.5 * rows
        img[..., 1] = 0.2
    elif kind == "blob":
        cy, cx = rng.uniform(12, 36, size=2)
        yy, xx = np.mgrid[0:h, 0:w]
        mask = ((yy - cy) ** 2 + (xx - cx) ** 2) < 120
        img[..., 2] = 0.15
        img[mask] = [0.1, 0.9, 0.3]
    elif kind == "checks":
        step = 8
        yy, xx = np.mgrid[0:h, 0:w]
        img[..., 1] = (((yy // step) + (xx // step)) % 2) * 0.8
        img[..., 2] = 0.6
    else:  # noise
        img[...] = rng.uniform(0.3, 0.7, size=(h, w, 3))
        img[..., 0] *= 0.3
    img += rng.normal(0, 0.03, size=img.shape)
    return Image.fromarray((np.clip(img, 0, 1) * 255).astype(np.uint8))


def make_image_tree(root, per_class: int, kinds=("stripes", "blob"), split="train", seed=0):
    rng = np.random.default_rng(seed)
    base = root / split
    for kind in kinds:
        cls_dir = base / kind
        cls_dir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            _texture(rng, kind).save(cls_dir / f"{i:03d}.png")
    return root


@pytest.fixture
def toy_tree(tmp_path):
    """10 images, 2 classes."""
    return make_image_tree(tmp_path / "toy", per_class=5)


@pytest.fixture(scope="session")
def sample_tree(tmp_path_factory):
    """100 images, 4 visually distinct classes."""
    root = tmp_path_factory.mktemp("images") / "sample"
    return make_image_tree(root, per_class=25, kinds=("stripes", "blob", "checks", "noise"), seed=7)
