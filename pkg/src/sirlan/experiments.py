"""Desk-scale benchmark runs shared by the CLI sweeps and the acceptance suite.

A benchmark is a seeded synthetic training set, an independently seeded
held-out set from the same generator, and a shape model fitted to the
training landmarks. All runs report held-out mean NME after each iteration.
"""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .inference import batch_iterate, initial_location
from .metrics import nme
from .networks import LanSpec, StackSpec, parameter_count
from .patches import normalize_face
from .sampling import Sample, SamplingConfig
from .shape_model import ShapeModel, fit_pca, shape_to_params
from .synthetic import SyntheticSpec, generate_dataset
from .train import TrainConfig, deterministic, train_cr_baseline, train_sir

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DeskConfig:
    count: int = 200
    train_seed: int = 0
    test_seed: int = 1
    face_size: int = 64
    patch_size: int = 17
    steps: int = 5000
    batch_size: int = 64
    learning_rate: float = 1.0
    weight_decay: float = 1e-4
    channels: int = 3
    sigma: float = 0.2
    mixture_weight: float = 0.5
    seed: int = 0
    iterations: int = 4

    def train_config(self, **overrides) -> TrainConfig:
        cfg = TrainConfig(batch_size=self.batch_size, max_steps=self.steps,
                          learning_rate=self.learning_rate,
                          weight_decay=self.weight_decay, seed=self.seed,
                          sampling=SamplingConfig(self.sigma, self.mixture_weight, seed=self.seed),
                          log_every=250)
        return replace(cfg, **overrides)

    def lan_spec(self, n_landmarks: int = 5) -> LanSpec:
        return LanSpec(n_landmarks, self.patch_size, self.channels)


@dataclass
class Benchmark:
    train: list
    test: list
    model: ShapeModel


@dataclass
class RunResult:
    label: str
    nme_per_iteration: list          # held-out mean NME at K = 0..len-1
    parameter_count: int
    payload_bytes: int
    seconds: float
    stage_initial_losses: list = field(default_factory=list)
    increment_norms: list = field(default_factory=list)

    @property
    def final_nme(self) -> float:
        return self.nme_per_iteration[-1]

    def to_dict(self) -> dict:
        return asdict(self)


def normalized_samples(spec: SyntheticSpec, face_size: int) -> list[Sample]:
    out = []
    for image, pts in generate_dataset(spec):
        face, lms, tf = normalize_face(image, pts, face_size)
        out.append(Sample(face, lms, None, image.name, tf))
    return out


def make_benchmark(cfg: DeskConfig = DeskConfig()) -> Benchmark:
    train = normalized_samples(SyntheticSpec(seed=cfg.train_seed, count=cfg.count,
                                             patch_size=cfg.patch_size, channels=cfg.channels),
                               cfg.face_size)
    test = normalized_samples(SyntheticSpec(seed=cfg.test_seed, count=cfg.count,
                                            patch_size=cfg.patch_size, channels=cfg.channels),
                              cfg.face_size)
    model = fit_pca([s.landmarks for s in train])
    for s in train + test:
        s.params = shape_to_params(s.landmarks, model)
    return Benchmark(train, test, model)


def iterate_and_score(samples, model, nets_per_step):
    """Mean NME after each step and mean increment norm (pixels) per step."""
    images = [s.image for s in samples]
    steps = batch_iterate(images, nets_per_step, [initial_location(im, model) for im in images])
    scores = [float(np.mean([nme(th, s.landmarks) for th, s in zip(step, samples)]))
              for step in steps]
    norms = [float(np.mean(np.linalg.norm(b - a, axis=(1, 2)))) for a, b in zip(steps, steps[1:])]
    return scores, norms


def _payload(nets) -> int:
    return 8 * sum(net.n_params() for net in nets)


def run_sir(bench: Benchmark, cfg: DeskConfig = DeskConfig(), net_spec=None, label="SIR-LAN",
            out_dir=None, iterations: int | None = None) -> RunResult:
    net_spec = net_spec or cfg.lan_spec(bench.model.n_landmarks)
    t0 = time.perf_counter()
    with deterministic():
        res = train_sir(bench.train, bench.model, net_spec, cfg.train_config(), out_dir)
        k = cfg.iterations if iterations is None else iterations
        scores, norms = iterate_and_score(bench.test, bench.model, [res.network] * k)
    out = RunResult(label, scores, parameter_count(net_spec), _payload([res.network]),
                    time.perf_counter() - t0, [res.initial_loss], norms)
    log.info("%s: NME per K %s", label, ["%.4f" % s for s in scores])
    return out


def run_stack(bench: Benchmark, cfg: DeskConfig = DeskConfig(), out_dir=None) -> RunResult:
    return run_sir(bench, cfg, StackSpec.matched_to(cfg.lan_spec(bench.model.n_landmarks)), "SIR-Stack", out_dir)


def run_cr(bench: Benchmark, cfg: DeskConfig = DeskConfig(), stages: int = 4,
           out_dir=None) -> RunResult:
    spec = cfg.lan_spec(bench.model.n_landmarks)
    t0 = time.perf_counter()
    with deterministic():
        results = train_cr_baseline(bench.train, bench.model, spec, stages, cfg.train_config(), out_dir)
        nets = [r.network for r in results]
        scores, norms = iterate_and_score(bench.test, bench.model, nets)
    out = RunResult("CR", scores, stages * parameter_count(spec), _payload(nets),
                    time.perf_counter() - t0, [r.initial_loss for r in results], norms)
    log.info("CR: NME per stage %s", ["%.4f" % s for s in scores])
    return out


def sigma_sweep(bench: Benchmark, cfg: DeskConfig = DeskConfig(), sigmas=(0.05, 0.1, 0.2, 0.4),
                cached: dict | None = None, out_dir=None) -> dict:
    """Final held-out NME per sigma. ``cached`` maps sigma to an existing RunResult."""
    out = {}
    for sigma in sigmas:
        if cached and sigma in cached:
            out[sigma] = cached[sigma]
            continue
        sub = Path(out_dir) / f"sigma_{sigma:g}" if out_dir else None
        out[sigma] = run_sir(bench, replace(cfg, sigma=sigma), label=f"sigma={sigma:g}", out_dir=sub)
    return out


def non_increasing_with_slack(values, max_inversions: int = 1, tolerance: float = 0.05) -> bool:
    """True if every step down the sequence is a decrease, except at most
    ``max_inversions`` rises each no larger than ``tolerance`` (relative)."""
    rises = [(b - a) / a for a, b in zip(values, values[1:]) if b > a]
    return len(rises) <= max_inversions and all(r <= tolerance for r in rises)
