"""PCA shape model with a 2D similarity pose.

A landmark set is stored as an ``(M, 2)`` array; the flat vector view
``(x1, y1, ..., xM, yM)`` is ``points.reshape(-1)``. Shapes are generated by

    theta = f * R(beta) @ (mean + basis @ alpha) + t

applied per point. The basis is kept orthogonal to the mean shape and to its
90-degree rotation, so pose and shape separate exactly and
:func:`shape_to_params` inverts :func:`params_to_shape` on the model span.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .errors import DataError, InsufficientDataError, ShapeError, SingularFitError


def rotation(beta: float) -> np.ndarray:
    c, s = np.cos(beta), np.sin(beta)
    return np.array([[c, -s], [s, c]])


def wrap_angle(beta: float) -> float:
    """Wrap to (-pi, pi]."""
    b = float(np.mod(beta + np.pi, 2 * np.pi) - np.pi)
    return np.pi if b == -np.pi else b


def _as_points(theta) -> np.ndarray:
    pts = np.asarray(theta, dtype=np.float64)
    if pts.ndim == 1:
        if pts.size % 2:
            raise ShapeError(f"flat landmark vector has odd length {pts.size}")
        pts = pts.reshape(-1, 2)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeError(f"expected (M, 2) landmarks, got {pts.shape}")
    return pts


def _rot90(flat: np.ndarray) -> np.ndarray:
    """Rotate every point of a flat shape vector by +90 degrees."""
    p = flat.reshape(-1, 2)
    return np.column_stack([-p[:, 1], p[:, 0]]).reshape(-1)


def similarity_fit(src: np.ndarray, dst: np.ndarray) -> tuple[float, float, np.ndarray]:
    """Least-squares (f, beta, t) with ``dst ~ f R(beta) src + t``."""
    src, dst = _as_points(src), _as_points(dst)
    sc = src - src.mean(axis=0)
    dc = dst - dst.mean(axis=0)
    denom = np.sum(sc * sc)
    if denom <= 0:
        raise SingularFitError("source shape has all points identical")
    a = np.sum(sc * dc) / denom
    b = np.sum(sc[:, 0] * dc[:, 1] - sc[:, 1] * dc[:, 0]) / denom
    f = float(np.hypot(a, b))
    beta = float(np.arctan2(b, a))
    t = dst.mean(axis=0) - f * src.mean(axis=0) @ rotation(beta).T
    return f, beta, t


@dataclass
class PoseShapeParams:
    alpha: np.ndarray
    t2d: np.ndarray
    beta: float
    f: float

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64).reshape(-1)
        self.t2d = np.asarray(self.t2d, dtype=np.float64).reshape(2)
        self.beta = wrap_angle(self.beta)
        self.f = float(self.f)
        if not self.f > 0:
            raise ShapeError(f"scale f must be positive, got {self.f}")

    def to_vector(self) -> np.ndarray:
        """``[alpha..., tx, ty, beta, f]``."""
        return np.concatenate([self.alpha, self.t2d, [self.beta, self.f]])

    @classmethod
    def from_vector(cls, v) -> "PoseShapeParams":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:-4], v[-4:-2], v[-2], v[-1])


@dataclass
class ShapeModel:
    mean_shape: np.ndarray       # (2M,), zero centroid
    basis: np.ndarray            # (2M, P), orthonormal columns
    component_std: np.ndarray    # (P,)
    param_scales: np.ndarray     # (P + 4,)

    @property
    def n_landmarks(self) -> int:
        return self.mean_shape.size // 2

    @property
    def n_components(self) -> int:
        return self.basis.shape[1]

    def mean_points(self) -> np.ndarray:
        return self.mean_shape.reshape(-1, 2)

    def extent(self) -> float:
        """Larger side of the mean shape's bounding box."""
        p = self.mean_points()
        return float(np.max(p.max(axis=0) - p.min(axis=0)))

    def save(self, path) -> None:
        checkpoint.save_tensors(path, [
            ("mean_shape", "vector", self.mean_shape),
            ("basis", "matrix", self.basis),
            ("component_std", "vector", self.component_std),
            ("param_scales", "vector", self.param_scales),
        ], {"type": "shape-model", "M": self.n_landmarks, "P": self.n_components})

    @classmethod
    def load(cls, path) -> "ShapeModel":
        meta, tensors = checkpoint.load_tensors(path)
        if meta.get("type") != "shape-model":
            raise DataError(f"{path}: not a shape-model file")
        arrays = {name: arr for name, _, arr in tensors}
        model = cls(arrays["mean_shape"], arrays["basis"].reshape(2 * meta["M"], meta["P"]),
                    arrays["component_std"], arrays["param_scales"])
        return model


def params_to_shape(s: PoseShapeParams, model: ShapeModel) -> np.ndarray:
    """Landmarks ``(M, 2)`` for pose/shape parameters ``s``."""
    if s.alpha.size != model.n_components:
        raise ShapeError(f"alpha has {s.alpha.size} entries, model has {model.n_components}")
    canon = (model.mean_shape + model.basis @ s.alpha).reshape(-1, 2)
    return s.f * canon @ rotation(s.beta).T + s.t2d


def shape_to_params(theta, model: ShapeModel) -> PoseShapeParams:
    pts = _as_points(theta)
    if pts.shape[0] != model.n_landmarks:
        raise ShapeError(f"{pts.shape[0]} landmarks given, model has {model.n_landmarks}")
    t = pts.mean(axis=0)
    centered = (pts - t).reshape(-1)
    if not np.any(np.abs(centered) > 1e-12 * max(1.0, float(np.abs(t).max()))):
        raise SingularFitError("all landmarks coincide")
    s0 = model.mean_shape
    n2 = s0 @ s0
    a = centered @ s0 / n2
    b = centered @ _rot90(s0) / n2
    f = float(np.hypot(a, b))
    if f <= 0:
        raise SingularFitError("shape has no component along the mean shape")
    beta = float(np.arctan2(b, a))
    canon = ((centered.reshape(-1, 2) @ rotation(beta)) / f).reshape(-1)
    alpha = model.basis.T @ (canon - s0)
    return PoseShapeParams(alpha, t, beta, f)


def _align_all(shapes: np.ndarray, target: np.ndarray) -> np.ndarray:
    out = np.empty_like(shapes)
    for i, s in enumerate(shapes):
        f, beta, t = similarity_fit(s, target)
        out[i] = f * s @ rotation(beta).T + t
    return out


def procrustes_align(shapes: np.ndarray, tol: float = 1e-12, max_iter: int = 100):
    """Generalised Procrustes analysis.

    Returns ``(mean, aligned)`` where ``mean`` is centred, has the average
    size of the centred inputs and the orientation of their plain average.
    """
    centered = shapes - shapes.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centered.reshape(len(shapes), -1), axis=1)
    if np.any(norms <= 0):
        raise SingularFitError("a training shape has all points identical")
    size = norms.mean()
    reference = centered.mean(axis=0)
    if np.linalg.norm(reference) <= 1e-9 * size:
        reference = centered[0]
    mean = centered[0] * size / norms[0]
    for _ in range(max_iter):
        aligned = _align_all(centered, mean)
        new = aligned.mean(axis=0)
        new -= new.mean(axis=0)
        f, beta, _ = similarity_fit(new, reference)
        new = new @ rotation(beta).T
        new *= size / np.linalg.norm(new)
        done = np.linalg.norm(new - mean) <= tol * size
        mean = new
        if done:
            break
    return mean, _align_all(centered, mean)


def fit_pca(shapes, variance_keep: float = 0.98) -> ShapeModel:
    shapes = np.stack([_as_points(s) for s in shapes]) if len(shapes) else np.empty((0, 0, 2))
    if len(shapes) < 2:
        raise InsufficientDataError(f"need at least 2 shapes to fit a model, got {len(shapes)}")
    if not 0 < variance_keep <= 1:
        raise ValueError("variance_keep must lie in (0, 1]")
    mean, aligned = procrustes_align(shapes)
    s0 = mean.reshape(-1)
    resid = aligned.reshape(len(shapes), -1) - s0
    # remove the directions that the pose parameters already cover
    for d in (s0, _rot90(s0)):
        d = d / np.linalg.norm(d)
        resid -= np.outer(resid @ d, d)
    _, sv, vt = np.linalg.svd(resid, full_matrices=False)
    var = sv ** 2 / (len(shapes) - 1)
    total = var.sum()
    if total <= 1e-20 * (s0 @ s0):
        p = 0
    else:
        p = int(np.searchsorted(np.cumsum(var) / total, variance_keep - 1e-12) + 1)
    basis = vt[:p].T.copy()
    # deterministic sign: largest-magnitude entry of each column is positive
    for j in range(p):
        if basis[np.argmax(np.abs(basis[:, j])), j] < 0:
            basis[:, j] *= -1
    comp_std = np.sqrt(var[:p])
    model = ShapeModel(s0, basis, comp_std, np.zeros(p + 4))
    poses = np.array([shape_to_params(s, model).to_vector()[p:] for s in shapes])
    poses[:, 2] = np.unwrap(poses[:, 2])
    model.param_scales = np.concatenate([comp_std, poses.std(axis=0, ddof=1)])
    return model
