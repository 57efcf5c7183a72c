"""Deterministic font-rendered digit corpus in MNIST IDX layout.

For offline environments without the real MNIST files: renders digit glyphs
with randomized font, placement, rotation, contrast, and noise, and writes
standard IDX pairs that the regular loader consumes. Generation is fully
determined by the seed. This is a test/bring-up aid, not a benchmark.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .data import IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC, MNIST_FILES

CANVAS = 56  # render at 2x and downsample for cleaner antialiasing
SIZE = 28


def _font_files() -> list:
    """Candidate scalable fonts: DejaVu family when matplotlib is around."""
    files = []
    try:
        import matplotlib
        ttf = Path(matplotlib.get_data_path()) / "fonts" / "ttf"
        for name in ("DejaVuSans.ttf", "DejaVuSans-Bold.ttf", "DejaVuSerif.ttf",
                     "DejaVuSerif-Bold.ttf", "DejaVuSansMono.ttf"):
            if (ttf / name).exists():
                files.append(ttf / name)
    except ImportError:
        pass
    return files


def _load_fonts(sizes):
    files = _font_files()
    fonts = {}
    for size in sizes:
        variants = [ImageFont.load_default(size=size)]
        for f in files:
            variants.append(ImageFont.truetype(str(f), size=size))
        fonts[size] = variants
    return fonts


def render_digit(digit: int, rng: np.random.Generator, fonts) -> np.ndarray:
    size = int(rng.integers(34, 47))
    variants = fonts[size]
    font = variants[int(rng.integers(0, len(variants)))]
    img = Image.new("L", (CANVAS, CANVAS), 0)
    draw = ImageDraw.Draw(img)
    left, top, right, bottom = draw.textbbox((0, 0), str(digit), font=font)
    x = (CANVAS - (right - left)) // 2 - left + int(rng.integers(-4, 5))
    y = (CANVAS - (bottom - top)) // 2 - top + int(rng.integers(-4, 5))
    draw.text((x, y), str(digit), fill=255, font=font)
    angle = float(rng.uniform(-12, 12))
    img = img.rotate(angle, resample=Image.BILINEAR, fillcolor=0)
    img = img.resize((SIZE, SIZE), resample=Image.BILINEAR)
    arr = np.asarray(img, dtype=np.float32)
    arr *= float(rng.uniform(0.75, 1.0))  # contrast jitter
    arr += rng.normal(0, float(rng.uniform(0, 10)), size=arr.shape)
    return np.clip(arr, 0, 255).astype(np.uint8)


def write_idx_pair(images: np.ndarray, labels: np.ndarray, images_path, labels_path):
    n, h, w = images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(labels.astype(np.uint8).tobytes())


def generate_corpus(out_dir, n_train: int = 20000, n_test: int = 10000, seed: int = 7):
    """Render the full corpus and write MNIST-named IDX files under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fonts = _load_fonts(range(34, 47))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x51977]))
    for split, count in (("train", n_train), ("test", n_test)):
        labels = rng.integers(0, 10, size=count).astype(np.uint8)
        images = np.empty((count, SIZE, SIZE), dtype=np.uint8)
        for i in range(count):
            images[i] = render_digit(int(labels[i]), rng, fonts)
        img_name, lab_name = MNIST_FILES[split]
        write_idx_pair(images, labels, out_dir / img_name, out_dir / lab_name)
    return out_dir


def ensure_corpus(cache_dir, n_train: int = 20000, n_test: int = 10000,
                  seed: int = 7) -> Path:
    """Generate the corpus once; subsequent calls reuse the cached files."""
    cache_dir = Path(cache_dir)
    stamp = cache_dir / "corpus.meta"
    want = f"v1 train={n_train} test={n_test} seed={seed}\n"
    if stamp.exists() and stamp.read_text() == want:
        return cache_dir
    generate_corpus(cache_dir, n_train, n_test, seed)
    stamp.write_text(want)
    return cache_dir
