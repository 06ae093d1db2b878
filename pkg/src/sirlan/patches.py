"""Images, face normalisation and bilinear patch extraction.

Coordinates are continuous pixel coordinates with the centre of pixel
``(row i, column j)`` at ``(x=j, y=i)``. Face boxes are ``(x, y, w, h)``
rectangles in the same frame.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError, InvalidBoxError


@dataclass
class Image:
    pixels: np.ndarray                      # (H, W, C) in [0, 1]
    face_box: tuple[float, float, float, float]
    name: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise DataError(f"image {self.name!r}: pixels must be (H, W, 1|3), got {px.shape}")
        self.pixels = px
        self.face_box = tuple(float(v) for v in self.face_box)
        check_box(self.face_box, self.width, self.height)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def box_side(self) -> float:
        return max(self.face_box[2], self.face_box[3])

    @property
    def box_center(self) -> np.ndarray:
        x, y, w, h = self.face_box
        return np.array([x + w / 2, y + h / 2])


def check_box(box, width, height):
    x, y, w, h = box
    if not (w > 0 and h > 0):
        raise InvalidBoxError(f"face box {box} has zero area")
    if x >= width or y >= height or x + w <= 0 or y + h <= 0:
        raise InvalidBoxError(f"face box {box} lies outside the {width}x{height} image")


@dataclass(frozen=True)
class PatchConfig:
    patch_size: int = 57
    channels: int = 3

    def __post_init__(self):
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError(f"patch size must be odd and positive, got {self.patch_size}")

    @property
    def radius(self) -> int:
        return self.patch_size // 2


def bilinear_sample(pixels: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample ``pixels`` (H, W, C) at arbitrary real positions, clamping to the edge.

    ``xs`` and ``ys`` broadcast together; the result has their shape plus C.
    """
    h, w = pixels.shape[:2]
    xs, ys = np.broadcast_arrays(np.asarray(xs, dtype=np.float64), np.asarray(ys, dtype=np.float64))
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(xs).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(ys).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    top = pixels[y0, x0] * (1 - fx) + pixels[y0, x1] * fx
    bot = pixels[y1, x0] * (1 - fx) + pixels[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def extract_patch(image: Image, center, cfg: PatchConfig) -> np.ndarray:
    """``(p, p, C)`` bilinear patch centred on a real-valued location."""
    return extract_patch_set(image, np.asarray(center, dtype=np.float64).reshape(1, 2), cfg)[0]


def extract_patch_set(image: Image, theta, cfg: PatchConfig) -> np.ndarray:
    """One patch per landmark, ``(M, p, p, C)``, in landmark order."""
    pts = np.asarray(theta, dtype=np.float64).reshape(-1, 2)
    offs = np.arange(-cfg.radius, cfg.radius + 1, dtype=np.float64)
    xs = pts[:, 0, None, None] + offs[None, None, :]
    ys = pts[:, 1, None, None] + offs[None, :, None]
    return bilinear_sample(image.pixels, xs, ys)


@dataclass(frozen=True)
class FaceTransform:
    """Similarity (uniform scale + shift) from raw-image to face-crop coordinates."""

    scale: float
    origin: tuple[float, float]

    def forward(self, pts) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - self.origin) * self.scale

    def inverse(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) / self.scale + self.origin

    def to_dict(self) -> dict:
        return {"scale": self.scale, "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d) -> "FaceTransform":
        return cls(float(d["scale"]), tuple(float(v) for v in d["origin"]))


def face_crop_transform(box, face_size: int, margin: float) -> FaceTransform:
    x, y, w, h = box
    if not (w > 0 and h > 0):
        raise InvalidBoxError(f"face box {box} has zero area")
    side = max(w, h) * (1 + 2 * margin)
    cx, cy = x + w / 2, y + h / 2
    return FaceTransform(face_size / side, (cx - side / 2, cy - side / 2))


def normalize_face(image: Image, landmarks=None, face_size: int = 256, margin: float = 0.1):
    """Crop the face box (plus ``margin`` of its side on every edge) to a square
    ``face_size`` image.

    Returns ``(face_image, landmarks_in_face_frame_or_None, transform)``.
    """
    tf = face_crop_transform(image.face_box, face_size, margin)
    grid = np.arange(face_size, dtype=np.float64)
    src = tf.inverse(np.stack([grid, grid], axis=1))
    pixels = bilinear_sample(image.pixels, src[None, :, 0], src[:, None, 1])
    x, y, w, h = image.face_box
    bx, by = tf.forward([x, y])
    out = Image(pixels, (bx, by, w * tf.scale, h * tf.scale), image.name)
    lms = None if landmarks is None else tf.forward(landmarks)
    return out, lms, tf


# --- portable pixmaps -------------------------------------------------------

def _pnm_tokens(data: bytes, count: int):
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pnm(path) -> np.ndarray:
    """Read a binary P5/P6 file into an (H, W, C) float array in [0, 1]."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: not a binary PGM/PPM file (magic {magic!r})")
    try:
        (w, h, maxval), pos = _pnm_tokens(data, 3)
        w, h, maxval = int(w), int(h), int(maxval)
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed header") from exc
    c = 1 if magic == b"P5" else 3
    dtype = ">u2" if maxval > 255 else "u1"
    n = w * h * c
    raw = np.frombuffer(data, dtype=dtype, count=n, offset=pos) if len(data) - pos >= n * np.dtype(dtype).itemsize else None
    if raw is None:
        raise DataError(f"{path}: truncated pixel data")
    return raw.reshape(h, w, c).astype(np.float64) / maxval


def write_pnm(path, pixels: np.ndarray) -> None:
    px = np.asarray(pixels)
    if px.ndim == 2:
        px = px[:, :, None]
    h, w, c = px.shape
    magic = {1: b"P5", 3: b"P6"}[c]
    q = np.clip(np.rint(px * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode())
        fh.write(q.tobytes())


def load_image(path, face_box=None, name="") -> Image:
    px = read_pnm(path)
    if face_box is None:
        face_box = (0.0, 0.0, px.shape[1], px.shape[0])
    return Image(px, face_box, name or Path(path).stem)


def with_box(image: Image, box) -> Image:
    return replace(image, face_box=tuple(box))
