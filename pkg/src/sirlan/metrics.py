"""Alignment error metrics: NME, CED, AUC and failure rate."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DegenerateFaceError, ShapeError

DEFAULT_THRESHOLD = 0.08


@dataclass(frozen=True)
class LandmarkScheme:
    """Landmark index groups used for normalisation and subsets."""

    left_eye: tuple[int, ...]
    right_eye: tuple[int, ...]
    left_outer: int
    right_outer: int
    interior: tuple[int, ...] | None = None


# 68-point iBUG markup: eyes 36-41 / 42-47, outer corners 36 and 45,
# interior 51 points = everything except the jaw line (0-16).
SCHEME_68 = LandmarkScheme(tuple(range(36, 42)), tuple(range(42, 48)), 36, 45,
                           tuple(range(17, 68)))
SCHEME_5 = LandmarkScheme((0,), (1,), 0, 1)


def default_scheme(n_landmarks: int) -> LandmarkScheme:
    if n_landmarks == 68:
        return SCHEME_68
    if n_landmarks == 5:
        return SCHEME_5
    raise ShapeError(f"no default landmark scheme for {n_landmarks} points; pass one explicitly")


def normalization_distance(gt, scheme: LandmarkScheme, normalization: str = "inter-pupil") -> float:
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if normalization == "inter-pupil":
        a = gt[list(scheme.left_eye)].mean(axis=0)
        b = gt[list(scheme.right_eye)].mean(axis=0)
    elif normalization == "inter-ocular":
        a, b = gt[scheme.left_outer], gt[scheme.right_outer]
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    return float(np.linalg.norm(a - b))


def nme(pred, gt, normalization: str = "inter-pupil", scheme: LandmarkScheme | None = None,
        subset=None) -> float:
    """Mean point-to-point error divided by the eye distance of ``gt``.

    The normalising distance always uses the full landmark set; ``subset``
    restricts which points enter the mean.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction has {len(pred)} points, ground truth {len(gt)}")
    scheme = scheme or default_scheme(len(gt))
    d = normalization_distance(gt, scheme, normalization)
    if d <= 0:
        raise DegenerateFaceError("normalisation distance is zero")
    err = np.linalg.norm(pred - gt, axis=1)
    if subset is not None:
        err = err[list(subset)]
    return float(err.mean() / d)


def step_cdf_area(errors, threshold: float) -> float:
    """Exact integral over [0, threshold] of the empirical CDF of ``errors``."""
    e = np.asarray(errors, dtype=np.float64)
    return float(np.mean(np.clip(threshold - e, 0.0, threshold)))


def ced_auc_fr(errors, threshold: float = DEFAULT_THRESHOLD, bins: int = 1000):
    """Return ``(ced_samples, auc, failure_rate)``.

    ``ced_samples`` is a list of ``(x, fraction <= x)`` at ``bins`` uniform
    points of ``[0, threshold]``. The AUC is the area under the empirical CDF
    on that interval divided by ``threshold``, integrated exactly over the
    step function rather than over the sampled grid.
    """
    e = np.asarray(errors, dtype=np.float64)
    if e.size == 0:
        raise ValueError("no errors given")
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    xs = np.linspace(0.0, threshold, bins)
    srt = np.sort(e)
    frac = np.searchsorted(srt, xs, side="right") / e.size
    auc = step_cdf_area(e, threshold) / threshold
    fr = float(np.mean(e > threshold))
    return list(zip(xs.tolist(), frac.tolist())), auc, fr


@dataclass
class EvalReport:
    per_image_nme: list
    normalization: str
    threshold: float
    auc: float
    failure_rate: float
    mean_nme: float
    ced_samples: list = field(repr=False, default_factory=list)
    subset: list | None = None
    names: list | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["auc_percent"] = 100 * self.auc
        d["failure_rate_percent"] = 100 * self.failure_rate
        return d


def evaluate(predictions, ground_truth, normalization: str = "inter-pupil",
             threshold: float = DEFAULT_THRESHOLD, bins: int = 1000,
             scheme: LandmarkScheme | None = None, subset=None, names=None) -> EvalReport:
    predictions = list(predictions)
    ground_truth = list(ground_truth)
    if len(predictions) != len(ground_truth):
        raise ShapeError(f"{len(predictions)} predictions for {len(ground_truth)} ground truths")
    if not predictions:
        raise ValueError("nothing to evaluate")
    errs = [nme(p, g, normalization, scheme, subset) for p, g in zip(predictions, ground_truth)]
    ced, auc, fr = ced_auc_fr(errs, threshold, bins)
    return EvalReport(errs, normalization, threshold, auc, fr, float(np.mean(errs)), ced,
                      list(subset) if subset is not None else None, names)
