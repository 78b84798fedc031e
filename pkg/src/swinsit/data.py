"""Dataset ingestion: CIFAR-10 binary batches, image folders, synthetic images.

All loaders return float32 arrays shaped [N, H, W, 3] with values in [0, 1].
The synthetic generator produces smooth structured images (gradients plus
soft blobs) so desk-scale models have learnable content when the real
CIFAR-10 files are not on disk.
"""

import os

import numpy as np

__all__ = [
    "ingest_dataset",
    "load_cifar10_binary",
    "write_cifar10_binary",
    "load_image_folder",
    "random_crop",
    "synthetic_images",
]

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 32*32*3 pixel bytes
CIFAR_SIDE = 32


def ingest_dataset(path, kind):
    """Load a dataset by kind: 'cifar10-binary' or 'image-folder'."""
    if kind == "cifar10-binary":
        return load_cifar10_binary(path)
    if kind == "image-folder":
        return load_image_folder(path)
    raise ValueError(f"unknown dataset kind {kind!r}")


def _parse_cifar_file(path):
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD_BYTES:
        raise ValueError(
            f"{path}: size {raw.size} is not a whole number of "
            f"{CIFAR_RECORD_BYTES}-byte CIFAR-10 records"
        )
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    planes = records[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    images = planes.transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    labels = records[:, 0].copy()
    return images, labels


def load_cifar10_binary(path):
    """Read CIFAR-10 binary batches from a file or directory of .bin files."""
    if os.path.isdir(path):
        files = sorted(
            os.path.join(path, f) for f in os.listdir(path) if f.endswith(".bin")
        )
        if not files:
            raise ValueError(f"{path}: no .bin batch files found")
    else:
        if not os.path.exists(path):
            raise ValueError(f"{path}: no such file")
        files = [path]
    parts = [_parse_cifar_file(f)[0] for f in files]
    return np.concatenate(parts, axis=0)


def write_cifar10_binary(images, labels, path):
    """Inverse of the reader; used to materialize CIFAR-format files."""
    images = np.asarray(images)
    pixels = np.clip(np.round(images * 255.0), 0, 255).astype(np.uint8)
    planes = pixels.transpose(0, 3, 1, 2).reshape(len(images), -1)
    records = np.concatenate(
        [np.asarray(labels, dtype=np.uint8).reshape(-1, 1), planes], axis=1
    )
    records.tofile(path)


def load_image_folder(path, exts=(".png", ".jpg", ".jpeg", ".bmp")):
    """Decode every image in a folder to a normalized RGB array."""
    from PIL import Image

    if not os.path.isdir(path):
        raise ValueError(f"{path}: not a directory")
    files = sorted(
        os.path.join(path, f)
        for f in os.listdir(path)
        if f.lower().endswith(exts)
    )
    if not files:
        raise ValueError(f"{path}: empty image folder")
    images = []
    shape = None
    for f in files:
        try:
            arr = np.asarray(Image.open(f).convert("RGB"), dtype=np.float32) / 255.0
        except Exception as exc:
            raise ValueError(f"{f}: cannot decode image ({exc})") from exc
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise ValueError(
                f"{f}: shape {arr.shape} differs from first image {shape}; "
                "crop to a common size first"
            )
        images.append(arr)
    return np.stack(images)


def random_crop(image, size=256, rng=None):
    """Uniformly positioned square crop; identity when the image fits exactly."""
    image = np.asarray(image)
    h, w = image.shape[0], image.shape[1]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop size {size}")
    rng = rng or np.random.default_rng()
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return image[top : top + size, left : left + size]


def synthetic_images(count, size=32, seed=0):
    """Smooth structured random images: gradient base plus Gaussian blobs."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(
        np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij"
    )
    images = np.empty((count, size, size, 3), dtype=np.float32)
    for i in range(count):
        base = rng.uniform(0.2, 0.8, size=3)
        gx = rng.uniform(-0.4, 0.4, size=3)
        gy = rng.uniform(-0.4, 0.4, size=3)
        img = base[None, None, :] + gx * xx[..., None] + gy * yy[..., None]
        for _ in range(rng.integers(2, 5)):
            cy, cx = rng.uniform(0.1, 0.9, size=2)
            radius = rng.uniform(0.05, 0.3)
            amp = rng.uniform(-0.5, 0.5, size=3)
            blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2)))
            img = img + amp * blob[..., None]
        images[i] = np.clip(img, 0.0, 1.0)
    return images
