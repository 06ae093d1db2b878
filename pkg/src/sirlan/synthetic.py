"""Deterministic synthetic faces with known landmark locations.

Each landmark is drawn as an oriented, coloured anisotropic Gaussian over a
smooth random background. Shapes come from a fixed linear shape space
(orthogonal to the similarity motions of the mean layout) plus a random
similarity pose relative to the face box. The generative model itself
(layout, shape basis, per-landmark appearance) depends only on
``appearance_seed``; ``seed`` controls the individual draws, so two datasets
with different ``seed`` values are samples of the same distribution.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import DataError
from .patches import Image
from .shape_model import rotation

_FIVE_POINT = np.array([
    [-0.50, -0.45],   # left eye
    [0.50, -0.45],    # right eye
    [0.00, 0.05],     # nose tip
    [-0.38, 0.50],    # left mouth corner
    [0.38, 0.50],     # right mouth corner
])

BOX_FRACTION = 0.65


@dataclass(frozen=True)
class SyntheticSpec:
    landmark_count: int = 5
    image_size: int = 64
    shape_components: int = 3
    seed: int = 0
    count: int = 200
    noise: float = 0.03
    channels: int = 3
    texture_kind: str = "oriented-blob"
    appearance_seed: int = 7
    patch_size: int = 17
    pose_jitter: float = 1.0     # multiplies all pose/shape variation

    def __post_init__(self):
        if self.landmark_count < 3:
            raise ValueError("landmark_count must be at least 3")
        if self.count < 1:
            raise ValueError("count must be at least 1")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.texture_kind != "oriented-blob":
            raise ValueError(f"unknown texture kind {self.texture_kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Generator:
    """The fixed generative model shared by all datasets of one appearance seed."""

    layout: np.ndarray          # (M, 2), unit extent, zero centroid
    basis: np.ndarray           # (2M, K) orthonormal
    component_std: np.ndarray   # (K,) in unit-extent units
    orientations: np.ndarray    # (M,)
    colors: np.ndarray          # (M, C)


def _layout(m: int) -> np.ndarray:
    if m == 5:
        pts = _FIVE_POINT.copy()
    else:
        k = np.arange(m) + 0.5
        r = np.sqrt(k / m)
        ang = k * np.pi * (3 - np.sqrt(5))
        pts = np.column_stack([r * np.cos(ang), r * np.sin(ang)])
    pts -= pts.mean(axis=0)
    return pts / np.max(pts.max(axis=0) - pts.min(axis=0))


def build_generator(spec: SyntheticSpec) -> Generator:
    m = spec.landmark_count
    rng = np.random.default_rng([spec.appearance_seed, m, spec.shape_components])
    layout = _layout(m)
    flat = layout.reshape(-1)
    rot = np.column_stack([-layout[:, 1], layout[:, 0]]).reshape(-1)
    tx = np.tile([1.0, 0.0], m)
    ty = np.tile([0.0, 1.0], m)
    sim = np.linalg.qr(np.column_stack([tx, ty, flat, rot]))[0]
    k = spec.shape_components
    if k > 2 * m - 4:
        raise ValueError(f"at most {2 * m - 4} shape components for {m} landmarks")
    raw = rng.standard_normal((2 * m, k))
    raw -= sim @ (sim.T @ raw)
    basis = np.linalg.qr(raw)[0]
    comp_std = 0.06 * 0.75 ** np.arange(k)
    phase = 2 * np.pi * np.arange(m) / m
    orientations = np.arange(m) * np.pi / m
    if spec.channels == 3:
        colors = np.column_stack([np.cos(phase), np.sin(phase), np.where(np.arange(m) % 2, -0.6, 0.6)])
        colors /= np.linalg.norm(colors, axis=1, keepdims=True)
    else:
        colors = np.ones((m, 1))
    return Generator(layout, basis, comp_std, orientations, colors)


def _blob(xs, ys, cx, cy, angle, scale, striped=False):
    """Oriented anisotropic Gaussian, or for grey images an oriented Gabor
    patch (colour no longer separates landmarks, so the stripes have to)."""
    c, s = np.cos(angle), np.sin(angle)
    u = (xs - cx) * c + (ys - cy) * s
    v = -(xs - cx) * s + (ys - cy) * c
    if striped:
        return np.exp(-0.5 * (u * u + v * v) / (3.0 * scale) ** 2) * np.cos(1.2 * u / scale)
    return np.exp(-0.5 * ((u / (3.0 * scale)) ** 2 + (v / (1.3 * scale)) ** 2))


def landmark_template(spec: SyntheticSpec, index: int, size: int | None = None,
                      gen: Generator | None = None) -> np.ndarray:
    """Landmark ``index``'s pattern on a zero background, ``(size, size, C)``."""
    gen = gen or build_generator(spec)
    size = size or spec.patch_size
    grid = np.arange(size, dtype=np.float64)
    c = (size - 1) / 2
    g = _blob(grid[None, :], grid[:, None], c, c, gen.orientations[index], _scale(spec),
              spec.channels == 1)
    return 0.3 * g[:, :, None] * gen.colors[index]


def _scale(spec: SyntheticSpec) -> float:
    return spec.image_size / 64.0


def _draw_shape(spec, gen, rng):
    side = BOX_FRACTION * spec.image_size * (1 + 0.05 * rng.uniform(-1, 1))
    center = spec.image_size / 2 + rng.uniform(-3, 3, size=2) * _scale(spec)
    box = (center[0] - side / 2, center[1] - side / 2, side, side)
    j = spec.pose_jitter
    alpha = j * gen.component_std * rng.standard_normal(gen.basis.shape[1])
    canon = (gen.layout.reshape(-1) + gen.basis @ alpha).reshape(-1, 2)
    f = 0.9 * side * (1 + j * 0.06 * rng.standard_normal())
    beta = j * 0.08 * rng.standard_normal()
    t = center + j * 0.04 * side * rng.standard_normal(2)
    return f * canon @ rotation(beta).T + t, box, beta


def _background(spec, rng):
    n = spec.image_size
    grid = np.arange(n, dtype=np.float64)
    bg = np.full((n, n, spec.channels), 0.5)
    for _ in range(3):
        freq = rng.uniform(0.5, 2.0) * 2 * np.pi / n
        ang = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(freq * (grid[None, :] * np.cos(ang) + grid[:, None] * np.sin(ang)) + phase)
        bg += 0.04 * wave[:, :, None] * rng.uniform(-1, 1, size=spec.channels)
    return bg


def render(spec: SyntheticSpec, gen: Generator, landmarks, beta, rng) -> np.ndarray:
    n = spec.image_size
    grid = np.arange(n, dtype=np.float64)
    img = _background(spec, rng)
    for k, (x, y) in enumerate(landmarks):
        g = _blob(grid[None, :], grid[:, None], x, y, gen.orientations[k] + beta, _scale(spec),
                  spec.channels == 1)
        img += 0.3 * g[:, :, None] * gen.colors[k]
    if spec.noise > 0:
        img += spec.noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def _collides(pts, radius) -> bool:
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    return bool(d.min() < radius)


def generate_one(spec: SyntheticSpec, index: int, gen: Generator | None = None,
                 max_retries: int = 100) -> tuple[Image, np.ndarray]:
    gen = gen or build_generator(spec)
    rng = np.random.default_rng([spec.seed, index])
    for _ in range(max_retries):
        pts, box, beta = _draw_shape(spec, gen, rng)
        if not _collides(pts, spec.patch_size // 2):
            break
    else:
        raise DataError(f"could not place non-colliding landmarks for image {index}")
    pixels = render(spec, gen, pts, beta, rng)
    return Image(pixels, box, f"synth_{index:05d}"), pts


def generate_dataset(spec: SyntheticSpec) -> list[tuple[Image, np.ndarray]]:
    gen = build_generator(spec)
    return [generate_one(spec, i, gen) for i in range(spec.count)]


def latent_shapes(spec: SyntheticSpec) -> np.ndarray:
    """Landmarks only (no rendering), ``(count, M, 2)``, identical to
    :func:`generate_dataset`'s annotations."""
    gen = build_generator(spec)
    out = []
    for i in range(spec.count):
        rng = np.random.default_rng([spec.seed, i])
        for _ in range(100):
            pts, _, _ = _draw_shape(spec, gen, rng)
            if not _collides(pts, spec.patch_size // 2):
                break
        out.append(pts)
    return np.stack(out)
