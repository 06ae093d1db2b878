"""Iterative landmark refinement with a trained regressor."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .patches import Image, PatchConfig, extract_patch_set
from .sampling import mean_center_params
from .shape_model import ShapeModel, params_to_shape


@dataclass
class IterationTrace:
    thetas: list = field(default_factory=list)          # K+1 arrays of shape (M, 2)
    increment_norms: list = field(default_factory=list)  # K+1 floats, 0.0 for theta_0

    @property
    def iterations(self) -> int:
        return len(self.thetas) - 1

    @property
    def final(self) -> np.ndarray:
        return self.thetas[-1]


def initial_location(image: Image, model: ShapeModel) -> np.ndarray:
    """Mean shape centred in the face box at 90% of its side."""
    return params_to_shape(mean_center_params(model, image.face_box), model)


def _patch_cfg(net) -> PatchConfig:
    return PatchConfig(net.spec.patch_size, net.spec.channels)


def _step(image: Image, theta: np.ndarray, net) -> tuple[np.ndarray, float]:
    patches = extract_patch_set(image, theta, _patch_cfg(net))
    inc = net.forward(patches[None])[0].reshape(-1, 2) * image.box_side
    return theta + inc, float(np.linalg.norm(inc))


def run_stages(image: Image, nets, theta0) -> IterationTrace:
    trace = IterationTrace([np.array(theta0, dtype=np.float64)], [0.0])
    theta = trace.thetas[0]
    for net in nets:
        theta, norm = _step(image, theta, net)
        trace.thetas.append(theta)
        trace.increment_norms.append(norm)
    return trace


def self_iterate(image: Image, net, model: ShapeModel, iterations: int = 4,
                 theta0=None) -> IterationTrace:
    """Apply the same regressor ``iterations`` times from the box initialisation."""
    if iterations < 0:
        raise ValueError("iterations must be non-negative")
    if theta0 is None:
        theta0 = initial_location(image, model)
    return run_stages(image, [net] * iterations, theta0)


def cascade_iterate(image: Image, nets, model: ShapeModel, theta0=None) -> IterationTrace:
    """Apply stage ``k``'s regressor at step ``k``."""
    if not nets:
        raise ValueError("cascade needs at least one stage")
    if theta0 is None:
        theta0 = initial_location(image, model)
    return run_stages(image, list(nets), theta0)


def batch_iterate(images, nets_per_step, thetas0) -> list[np.ndarray]:
    """Vectorised variant over many images; returns the per-step landmark arrays.

    ``nets_per_step`` lists the network used at each step. The result has
    ``len(nets_per_step) + 1`` entries, each ``(N, M, 2)``.
    """
    thetas = np.array(thetas0, dtype=np.float64)
    out = [thetas.copy()]
    sides = np.array([im.box_side for im in images])
    for net in nets_per_step:
        cfg = _patch_cfg(net)
        patches = np.stack([extract_patch_set(im, th, cfg) for im, th in zip(images, thetas)])
        inc = net.forward(patches).reshape(len(images), -1, 2) * sides[:, None, None]
        thetas = thetas + inc
        out.append(thetas.copy())
    return out
