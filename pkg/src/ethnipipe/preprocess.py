"""Image normalization chain: grayscale, face crop, 80x80 resize, denoise, triplicate.

Images are plain numpy arrays: RGB is uint8 (H, W, 3) interleaved, grayscale
is uint8 (H, W), and a network input is float32 (80, 80, 3) in [0, 1] with
three identical channels. Every operation is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import uniform_filter

from .errors import DetectorLoadError

NET_SIDE = 80
NET_CHANNELS = 3
# ITU-R BT.601 luma weights.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def ensure_rgb(img: np.ndarray) -> np.ndarray:
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) RGB image, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {img.dtype}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must have positive dimensions")
    return img


def ensure_gray(img: np.ndarray) -> np.ndarray:
    if img.ndim != 2:
        raise ValueError(f"expected (H, W) grayscale image, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {img.dtype}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError("image must have positive dimensions")
    return img


def read_image(path: Path | str) -> np.ndarray:
    """Decode a PNG/JPEG file to uint8 grayscale (H, W) or RGB (H, W, 3)."""
    with Image.open(path) as img:
        if img.mode == "L":
            return np.asarray(img, dtype=np.uint8)
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Luma conversion: Y = round(0.299 R + 0.587 G + 0.114 B), clamped to [0, 255]."""
    ensure_rgb(img)
    r, g, b = LUMA_WEIGHTS
    y = r * img[:, :, 0].astype(np.float64) + g * img[:, :, 1] + b * img[:, :, 2]
    return np.clip(np.rint(y), 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class FaceBox:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"face box must have positive size, got {self.w}x{self.h}")

    @property
    def area(self) -> int:
        return self.w * self.h


class FaceDetector(Protocol):
    def detect(self, gray: np.ndarray) -> list[FaceBox]: ...


class CascadeFaceDetector:
    """Staged-cascade frontal-face detector (LBP features) using the model
    bundled with scikit-image. Detection is a pure sliding-window scan, so
    results are deterministic for a given image."""

    def __init__(
        self,
        cascade_path: str | None = None,
        scale_factor: float = 1.2,
        step_ratio: float = 1.0,
        min_size: int = 24,
    ):
        try:
            from skimage.data import lbp_frontal_face_cascade_filename
            from skimage.feature import Cascade
        except ImportError as exc:
            raise DetectorLoadError(
                f"scikit-image is required for the cascade detector: {exc}"
            ) from exc
        if cascade_path is None:
            cascade_path = lbp_frontal_face_cascade_filename()
        try:
            self._classifier = Cascade(cascade_path)
        except Exception as exc:
            raise DetectorLoadError(
                f"failed to load cascade model from {cascade_path}: {exc}"
            ) from exc
        self.cascade_path = cascade_path
        self.scale_factor = scale_factor
        self.step_ratio = step_ratio
        self.min_size = min_size

    def detect(self, gray: np.ndarray) -> list[FaceBox]:
        ensure_gray(gray)
        h, w = gray.shape
        if min(h, w) < self.min_size:
            return []
        hits = self._classifier.detect_multi_scale(
            img=gray,
            scale_factor=self.scale_factor,
            step_ratio=self.step_ratio,
            min_size=(self.min_size, self.min_size),
            max_size=(h, w),
        )
        return [
            FaceBox(int(d["c"]), int(d["r"]), int(d["width"]), int(d["height"]))
            for d in hits
        ]


class FixedBoxDetector:
    """Detector replaying a fixed detection list; used to freeze fixtures in tests."""

    def __init__(self, boxes: Sequence[FaceBox]):
        self.boxes = list(boxes)

    def detect(self, gray: np.ndarray) -> list[FaceBox]:
        ensure_gray(gray)
        return list(self.boxes)


def detect_primary_face(gray: np.ndarray, detector: FaceDetector) -> FaceBox | None:
    """Largest-area detection, ties broken by smallest x then smallest y; None if no face."""
    ensure_gray(gray)
    boxes = detector.detect(gray)
    if not boxes:
        return None
    return min(boxes, key=lambda b: (-b.area, b.x, b.y))


def crop(img: np.ndarray, box: FaceBox) -> np.ndarray:
    ensure_gray(img)
    h, w = img.shape
    if box.x < 0 or box.y < 0 or box.x + box.w > w or box.y + box.h > h:
        raise ValueError(
            f"box (x={box.x}, y={box.y}, w={box.w}, h={box.h}) exceeds image bounds {w}x{h}"
        )
    return img[box.y : box.y + box.h, box.x : box.x + box.w].copy()


def _bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample with half-pixel-centered sampling and edge clamping."""
    in_h, in_w = img.shape
    src = img.astype(np.float64)

    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    fy = ys - y0
    fx = xs - x0
    y0c = np.clip(y0, 0, in_h - 1).astype(np.intp)
    y1c = np.clip(y0 + 1, 0, in_h - 1).astype(np.intp)
    x0c = np.clip(x0, 0, in_w - 1).astype(np.intp)
    x1c = np.clip(x0 + 1, 0, in_w - 1).astype(np.intp)

    fy = fy[:, None]
    fx = fx[None, :]
    top = src[np.ix_(y0c, x0c)] * (1 - fx) + src[np.ix_(y0c, x1c)] * fx
    bottom = src[np.ix_(y1c, x0c)] * (1 - fx) + src[np.ix_(y1c, x1c)] * fx
    out = top * (1 - fy) + bottom * fy
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def resize_80(img: np.ndarray) -> np.ndarray:
    """Downscale (or upscale) a grayscale image to exactly 80x80."""
    ensure_gray(img)
    return _bilinear_resize(img, NET_SIDE, NET_SIDE)


def denoise_nlm(
    img: np.ndarray,
    h: float = 3.0,
    template: int = 7,
    search: int = 21,
    sigma: float = 0.0,
    check_weights: bool = False,
) -> np.ndarray:
    """Non-local means denoising.

    Each output pixel is the weighted mean of pixels in the search window,
    weighted by exp(-max(d^2 - 2 sigma^2, 0) / h^2) where d^2 is the mean
    squared difference between the two pixels' template-window patches.
    Borders are handled by edge replication.
    """
    ensure_gray(img)
    if h <= 0:
        raise ValueError(f"filter strength h must be > 0, got {h}")
    if template % 2 == 0 or search % 2 == 0:
        raise ValueError(f"template ({template}) and search ({search}) windows must be odd")
    if template >= search:
        raise ValueError(f"template window ({template}) must be smaller than search ({search})")

    ih, iw = img.shape
    f = template // 2
    t = search // 2
    padded = np.pad(img.astype(np.float64), t + f, mode="edge")

    # Center block extended by the template radius, so windowed means over it
    # are exact for every pixel of the original image.
    center_ext = padded[t : t + ih + 2 * f, t : t + iw + 2 * f]
    two_sigma_sq = 2.0 * sigma * sigma
    offsets = [(di, dj) for di in range(-t, t + 1) for dj in range(-t, t + 1)]

    def offset_weight(di: int, dj: int) -> tuple[np.ndarray, np.ndarray]:
        shifted_ext = padded[t + di : t + di + ih + 2 * f, t + dj : t + dj + iw + 2 * f]
        sq = (center_ext - shifted_ext) ** 2
        dist = uniform_filter(sq, size=template)[f : f + ih, f : f + iw]
        w = np.exp(-np.maximum(dist - two_sigma_sq, 0.0) / (h * h))
        return w, shifted_ext[f : f + ih, f : f + iw]

    num = np.zeros((ih, iw))
    den = np.zeros((ih, iw))
    for di, dj in offsets:
        w, vals = offset_weight(di, dj)
        num += w * vals
        den += w

    if check_weights:
        # Re-accumulate the normalized weights in reverse offset order; per
        # pixel they must sum to 1, guarding slicing/accumulation mistakes.
        wsum = np.zeros((ih, iw))
        for di, dj in reversed(offsets):
            wsum += offset_weight(di, dj)[0] / den
        if not np.all(np.abs(wsum - 1.0) <= 1e-6):
            raise AssertionError("non-local means weights do not normalize to 1")

    out = num / den
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def triplicate(img: np.ndarray) -> np.ndarray:
    """Unit-scale an 80x80 grayscale image and copy it into three channels."""
    ensure_gray(img)
    if img.shape != (NET_SIDE, NET_SIDE):
        raise ValueError(f"expected {NET_SIDE}x{NET_SIDE} input, got {img.shape}")
    plane = (img.astype(np.float32) / 255.0)[:, :, None]
    return np.repeat(plane, NET_CHANNELS, axis=2)


def center_square_crop(img: np.ndarray) -> np.ndarray:
    """Centered square crop at the shorter side, biased up-left on odd margins."""
    ensure_gray(img)
    h, w = img.shape
    side = min(h, w)
    y = (h - side) // 2
    x = (w - side) // 2
    return img[y : y + side, x : x + side].copy()


@dataclass(frozen=True)
class Skip:
    """Marker for an image the pipeline declined to process."""

    reason: str


POLICIES = ("skip", "center-crop")


def preprocess_pipeline(
    img: np.ndarray,
    detector: FaceDetector | None = None,
    policy: str = "skip",
    nlm_h: float = 3.0,
    nlm_template: int = 7,
    nlm_search: int = 21,
    nlm_sigma: float = 0.0,
) -> np.ndarray | Skip:
    """Full normalization chain: grayscale, detect+crop, resize, denoise, triplicate.

    Grayscale inputs skip the conversion step. With no face found (or no
    detector), policy "skip" returns a Skip marker and "center-crop" falls
    back to a centered square crop.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown no-face policy {policy!r}; expected one of {POLICIES}")
    gray = img if img.ndim == 2 else to_grayscale(img)
    ensure_gray(gray)

    box = detect_primary_face(gray, detector) if detector is not None else None
    if box is not None:
        face = crop(gray, box)
    elif policy == "center-crop":
        face = center_square_crop(gray)
    else:
        reason = "no face detected" if detector is not None else "no detector configured"
        return Skip(reason)

    face = resize_80(face)
    face = denoise_nlm(face, h=nlm_h, template=nlm_template, search=nlm_search, sigma=nlm_sigma)
    return triplicate(face)
