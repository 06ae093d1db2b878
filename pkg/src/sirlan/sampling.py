"""Online training-data generation by Gaussian sampling in parameter space.

Each draw picks one of two Gaussian centres: the mean shape placed at the
face box's canonical pose (coarse stage), or the face's own ground-truth
parameters (fine stage). Every parameter dimension then receives independent
noise with standard deviation ``sigma * model.param_scales[d]``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .patches import Image, PatchConfig, extract_patch_set
from .shape_model import PoseShapeParams, ShapeModel, params_to_shape

log = logging.getLogger(__name__)

BOX_FILL = 0.9


@dataclass(frozen=True)
class SamplingConfig:
    sigma: float = 0.2
    mixture_weight: float = 0.5
    periods: int | None = None      # None: unbounded online stream
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0 <= self.mixture_weight <= 1:
            raise ValueError("mixture_weight must lie in [0, 1]")
        if self.periods is not None and self.periods < 1:
            raise ValueError("periods must be positive")


@dataclass
class Sample:
    """One annotated face in the normalised frame."""

    image: Image
    landmarks: np.ndarray | None            # (M, 2)
    params: PoseShapeParams | None = None   # fitted ground-truth S
    name: str = ""
    transform: object = None                # FaceTransform back to the raw image


@dataclass
class TrainingExample:
    patches: np.ndarray          # (M, p, p, C)
    target: np.ndarray           # (2M,) normalised increment
    source: str = ""
    theta: np.ndarray | None = None   # sampled landmarks (M, 2)
    from_mean: bool = False


def mean_center_params(model: ShapeModel, box) -> PoseShapeParams:
    """Mean shape centred in ``box`` with its larger extent at 90% of the box side."""
    x, y, w, h = box
    side = max(w, h)
    f = BOX_FILL * side / model.extent()
    return PoseShapeParams(np.zeros(model.n_components), (x + w / 2, y + h / 2), 0.0, f)


def sample_params(s_gt: PoseShapeParams, model: ShapeModel, cfg: SamplingConfig,
                  rng: np.random.Generator, box) -> tuple[PoseShapeParams, bool]:
    """Draw S from the two-centre mixture. Returns ``(params, from_mean_branch)``."""
    from_mean = bool(rng.random() < cfg.mixture_weight)
    center = mean_center_params(model, box) if from_mean else s_gt
    c = center.to_vector()
    v = c + cfg.sigma * model.param_scales * rng.standard_normal(c.size)
    # keep the scale positive; only reachable for sigma far beyond its useful range
    v[-1] = max(v[-1], 1e-3 * c[-1])
    return PoseShapeParams.from_vector(v), from_mean


def increment_target(theta_gt, theta, box_side: float) -> np.ndarray:
    return ((np.asarray(theta_gt) - np.asarray(theta)) / box_side).reshape(-1)


def generate_example(image: Image, theta_gt, s_sampled: PoseShapeParams, model: ShapeModel,
                     patch_cfg: PatchConfig, source: str = "", from_mean: bool = False
                     ) -> TrainingExample:
    theta = params_to_shape(s_sampled, model)
    return TrainingExample(
        patches=extract_patch_set(image, theta, patch_cfg),
        target=increment_target(theta_gt, theta, image.box_side),
        source=source or image.name,
        theta=theta,
        from_mean=from_mean,
    )


class TrainingStream:
    """Lazy, period-major stream of training examples.

    Iterating yields ``periods * N`` examples (forever if ``periods`` is
    None). Entries without annotations are skipped and counted.
    """

    def __init__(self, dataset: Sequence[Sample], model: ShapeModel, cfg: SamplingConfig,
                 patch_cfg: PatchConfig, shuffle: bool = False):
        self.dataset = list(dataset)
        self.model = model
        self.cfg = cfg
        self.patch_cfg = patch_cfg
        self.shuffle = shuffle
        self.skipped = 0
        self.branch_counts = {"mean": 0, "gt": 0}
        self.rng = np.random.default_rng(cfg.seed)

    def __iter__(self) -> Iterator[TrainingExample]:
        t = 0
        while self.cfg.periods is None or t < self.cfg.periods:
            order = self.rng.permutation(len(self.dataset)) if self.shuffle else range(len(self.dataset))
            produced = 0
            for i in order:
                sample = self.dataset[i]
                if sample.landmarks is None or sample.params is None:
                    self.skipped += 1
                    log.warning("skipping %s: missing annotation", sample.name)
                    continue
                s, from_mean = sample_params(sample.params, self.model, self.cfg, self.rng,
                                             sample.image.face_box)
                self.branch_counts["mean" if from_mean else "gt"] += 1
                produced += 1
                yield generate_example(sample.image, sample.landmarks, s, self.model,
                                       self.patch_cfg, sample.name, from_mean)
            if produced == 0:
                return
            t += 1

    def batches(self, batch_size: int) -> Iterator[tuple[np.ndarray, np.ndarray, list]]:
        """Group the stream into ``(patches, targets, examples)`` mini-batches."""
        buf = []
        for ex in self:
            buf.append(ex)
            if len(buf) == batch_size:
                yield np.stack([e.patches for e in buf]), np.stack([e.target for e in buf]), buf
                buf = []
        if buf:
            yield np.stack([e.patches for e in buf]), np.stack([e.target for e in buf]), buf


def training_stream(dataset, model, cfg, patch_cfg, shuffle=False) -> TrainingStream:
    return TrainingStream(dataset, model, cfg, patch_cfg, shuffle)
