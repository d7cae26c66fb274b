"""Generator for a small synthetic face-like dataset.

Four classes of cartoon "portraits", one per target label, drawn so the
classes differ strongly in tone and geometry: skin shade, face aspect, eye
size, mouth shape, and background level. The point is a committed, license-
free corpus on which the full chain (ingest -> preprocess -> split -> train
-> evaluate) can reach high accuracy quickly; the images are face-like, not
faces.

Output layout matches the ingest contract: one subdirectory per class name,
PNG files inside. Fully deterministic for a given seed.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .dataset import EthnicLabel

# tone/geometry per class; values are jittered slightly per image
_STYLE = {
    EthnicLabel.AFRICAN: dict(skin=70, bg=215, aspect=1.00, eye=0.11, mouth="smile", brow=2),
    EthnicLabel.ASIAN: dict(skin=135, bg=45, aspect=1.28, eye=0.05, mouth="flat", brow=2),
    EthnicLabel.CAUCASIAN: dict(skin=205, bg=130, aspect=0.80, eye=0.13, mouth="frown", brow=1),
    EthnicLabel.INDIAN: dict(skin=165, bg=82, aspect=0.95, eye=0.09, mouth="smile", brow=4),
}


def _draw_portrait(width: int, height: int, label: EthnicLabel, rng: np.random.Generator) -> Image.Image:
    style = _STYLE[label]
    skin = int(np.clip(style["skin"] + rng.integers(-8, 9), 0, 255))
    bg = int(np.clip(style["bg"] + rng.integers(-8, 9), 0, 255))
    aspect = style["aspect"] + float(rng.uniform(-0.04, 0.04))

    img = Image.new("RGB", (width, height), (bg, bg, bg))
    draw = ImageDraw.Draw(img)

    cx, cy = width / 2, height / 2
    half_h = 0.36 * height * (1 + float(rng.uniform(-0.05, 0.05)))
    half_w = half_h * aspect
    skin_rgb = (min(skin + 14, 255), skin, max(skin - 10, 0))
    draw.ellipse((cx - half_w, cy - half_h, cx + half_w, cy + half_h), fill=skin_rgb)

    eye_r = style["eye"] * height
    eye_dx, eye_dy = 0.42 * half_w, 0.30 * half_h
    for side in (-1, 1):
        ex, ey = cx + side * eye_dx, cy - eye_dy
        draw.ellipse((ex - eye_r, ey - 0.6 * eye_r, ex + eye_r, ey + 0.6 * eye_r),
                     fill=(245, 245, 245))
        pupil = 0.35 * eye_r
        draw.ellipse((ex - pupil, ey - pupil, ex + pupil, ey + pupil), fill=(20, 20, 20))
        brow_y = ey - 1.6 * eye_r
        draw.line((ex - eye_r, brow_y, ex + eye_r, brow_y),
                  fill=(15, 15, 15), width=style["brow"])

    nose_h = 0.22 * half_h
    draw.line((cx, cy - 0.1 * half_h, cx, cy + nose_h), fill=(40, 30, 30), width=2)

    mouth_w, mouth_y = 0.45 * half_w, cy + 0.55 * half_h
    box = (cx - mouth_w, mouth_y - 0.18 * half_h, cx + mouth_w, mouth_y + 0.18 * half_h)
    if style["mouth"] == "smile":
        draw.arc(box, start=20, end=160, fill=(30, 10, 10), width=3)
    elif style["mouth"] == "frown":
        draw.arc(box, start=200, end=340, fill=(30, 10, 10), width=3)
    else:
        draw.line((cx - mouth_w, mouth_y, cx + mouth_w, mouth_y), fill=(30, 10, 10), width=3)

    pixels = np.asarray(img, dtype=np.float64)
    pixels += rng.normal(0.0, 2.0, size=pixels.shape)
    return Image.fromarray(np.clip(np.rint(pixels), 0, 255).astype(np.uint8))


def generate_synthetic_dataset(
    root: Path | str,
    per_class: int = 100,
    seed: int = 0,
    side_range: tuple[int, int] = (96, 160),
) -> list[Path]:
    """Write per_class portraits for each class under root/<ClassName>/.

    Image sizes are jittered (and not necessarily square) so the resize and
    crop stages do real work. Returns the written paths in order.
    """
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    lo, hi = side_range
    if not 16 <= lo <= hi:
        raise ValueError(f"bad side_range {side_range}")
    root = Path(root)
    rng = np.random.default_rng(seed)
    written: list[Path] = []
    for label in EthnicLabel:
        class_dir = root / label.display_name
        class_dir.mkdir(parents=True, exist_ok=True)
        for i in range(per_class):
            width = int(rng.integers(lo, hi + 1))
            height = int(rng.integers(lo, hi + 1))
            img = _draw_portrait(width, height, label, rng)
            path = class_dir / f"{label.display_name.lower()}_{i:03d}.png"
            img.save(path)
            written.append(path)
    return written
