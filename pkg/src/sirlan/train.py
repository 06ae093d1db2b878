"""Training loops for the self-iterative regressor and the cascaded baseline."""
from __future__ import annotations

import contextlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import NumericError
from .networks import build_network, save_networks
from .patches import PatchConfig, extract_patch_set
from .sampling import SamplingConfig, TrainingStream, increment_target
from .tensor import Adadelta, mse_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    max_steps: int = 5000
    learning_rate: float = 0.1
    weight_decay: float = 1e-4
    rho: float = 0.95
    eps: float = 1e-6
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    checkpoint_every: int = 0
    seed: int = 0
    validation_fraction: float = 0.1
    validation_periods: int = 4
    log_every: int = 100

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    network: object
    log: list
    initial_loss: float
    final_val_loss: float | None
    initial_val_loss: float | None


def deterministic(enabled: bool = True):
    """Context manager pinning BLAS to one thread so reductions have a fixed order."""
    if not enabled:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=1)


def split_dataset(dataset, fraction: float, seed: int):
    """Deterministic (train, validation) split; validation is empty if ``fraction`` is 0."""
    n = len(dataset)
    n_val = int(math.ceil(fraction * n)) if fraction > 0 and n > 1 else 0
    order = np.random.default_rng([seed, 991]).permutation(n)
    val_idx = set(order[:n_val].tolist())
    train = [s for i, s in enumerate(dataset) if i not in val_idx]
    val = [s for i, s in enumerate(dataset) if i in val_idx]
    return train, val


def _fixed_examples(samples, model, sampling: SamplingConfig, patch_cfg, periods, seed):
    if not samples:
        return None
    cfg = replace(sampling, periods=periods, seed=seed)
    exs = list(TrainingStream(samples, model, cfg, patch_cfg))
    return exs


def _stack(exs):
    return np.stack([e.patches for e in exs]), np.stack([e.target for e in exs])


def _eval_loss(net, patches, targets, chunk=256) -> float:
    total = 0.0
    for i in range(0, len(patches), chunk):
        pred = net.forward(patches[i:i + chunk])
        total += float(np.sum((pred - targets[i:i + chunk]) ** 2))
    return total / len(patches)


class _LogWriter:
    def __init__(self, path):
        self.fh = open(path, "w") if path else None

    def write(self, record: dict):
        if self.fh:
            self.fh.write(json.dumps(record, sort_keys=True) + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def fit(net, batches, cfg: TrainConfig, val=None, out_dir=None, stage_tag="", stream=None,
         ckpt_name="checkpoint.sirw"):
    """Minimise the mean squared increment error over ``batches`` of
    ``(patches, targets)`` with Adadelta, for at most ``cfg.max_steps`` steps."""
    opt = Adadelta(cfg.learning_rate, cfg.rho, cfg.eps, cfg.weight_decay)
    records = []
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    writer = _LogWriter(out_dir / f"train{stage_tag}.jsonl" if out_dir else None)
    val_p, val_t = val if val is not None else (None, None)
    initial_val = _eval_loss(net, val_p, val_t) if val_p is not None else None
    initial_loss = None
    last_val = initial_val
    t0 = time.perf_counter()
    try:
        for step, (patches, targets) in enumerate(batches):
            if step >= cfg.max_steps:
                break
            pred = net.forward(patches)
            loss, grad = mse_loss(pred, targets)
            if not math.isfinite(loss):
                raise NumericError(f"loss diverged at step {step}{stage_tag}; "
                                   f"last good checkpoint kept in {out_dir}")
            if initial_loss is None:
                initial_loss = loss
            net.backward(grad)
            opt.step(net.optimizer_entries())
            done = step + 1
            rec = {"step": done, "mean_batch_loss": loss,
                   "wall_time": time.perf_counter() - t0}
            if stream is not None:
                rec["branch_counts"] = dict(stream.branch_counts)
            if val_p is not None and (done % cfg.log_every == 0 or done == cfg.max_steps):
                last_val = _eval_loss(net, val_p, val_t)
                rec["val_loss"] = last_val
            if done % cfg.log_every == 0 or done == cfg.max_steps or done == 1:
                records.append(rec)
                writer.write(rec)
                log.info("step %d%s loss %.6g", done, stage_tag, loss)
            if out_dir and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                save_networks(out_dir / ckpt_name, net)
    finally:
        writer.close()
    return TrainResult(net, records, initial_loss, last_val, initial_val)


def train_sir(dataset, model, net_spec, cfg: TrainConfig = TrainConfig(), out_dir=None,
              network=None, extra_meta: dict | None = None) -> TrainResult:
    """Train one regressor on the mixture-sampled stream (mean-squared increment error)."""
    patch_cfg = PatchConfig(net_spec.patch_size, net_spec.channels)
    train, val = split_dataset(dataset, cfg.validation_fraction, cfg.seed)
    net = network or build_network(net_spec, np.random.default_rng(cfg.seed))
    stream = TrainingStream(train, model, cfg.sampling, patch_cfg, shuffle=True)
    batches = ((p, t) for p, t, _ in stream.batches(cfg.batch_size))
    val_exs = _fixed_examples(val, model, cfg.sampling, patch_cfg, cfg.validation_periods,
                              cfg.seed + 1)
    result = fit(net, batches, cfg, _stack(val_exs) if val_exs else None, out_dir,
                  stream=stream)
    if out_dir:
        save_networks(Path(out_dir) / "checkpoint.sirw", net, extra_meta)
    return result


def propagate(examples, images, nets, patch_cfg):
    """Move each example's landmarks through ``nets`` in order, re-extracting
    patches and targets at the final location."""
    if not nets:
        return examples
    thetas = np.stack([e.theta for e in examples])
    ims = [images[e.source] for e in examples]
    sides = np.array([im.box_side for im in ims])
    patches = np.stack([e.patches for e in examples])
    for k, net in enumerate(nets):
        inc = net.forward(patches).reshape(thetas.shape) * sides[:, None, None]
        thetas = thetas + inc
        patches = np.stack([extract_patch_set(im, th, patch_cfg) for im, th in zip(ims, thetas)])
    out = []
    for e, im, th, p in zip(examples, ims, thetas, patches):
        gt = e.theta + e.target.reshape(-1, 2) * im.box_side
        out.append(replace(e, patches=p, theta=th, target=increment_target(gt, th, im.box_side)))
    return out


def train_cr_baseline(dataset, model, net_spec, stages: int = 4,
                      cfg: TrainConfig = TrainConfig(), out_dir=None,
                      extra_meta: dict | None = None) -> list[TrainResult]:
    """Train ``stages`` regressors sequentially.

    Stage 1 sees mean-shape-centred samples only. Stage k sees the same draws
    moved through the already-trained regressors 1..k-1.
    """
    if stages < 1:
        raise ValueError("need at least one stage")
    patch_cfg = PatchConfig(net_spec.patch_size, net_spec.channels)
    sampling = replace(cfg.sampling, mixture_weight=1.0)
    stage_cfg = replace(cfg, sampling=sampling)
    train, val = split_dataset(dataset, cfg.validation_fraction, cfg.seed)
    images = {s.name: s.image for s in dataset}
    val_exs = _fixed_examples(val, model, sampling, patch_cfg, cfg.validation_periods, cfg.seed + 1)
    results, nets = [], []
    for k in range(stages):
        frozen = list(nets)
        net = build_network(net_spec, np.random.default_rng(cfg.seed))
        stream = TrainingStream(train, model, sampling, patch_cfg, shuffle=True)

        def batches(stream=stream, frozen=frozen):
            for _, _, exs in stream.batches(cfg.batch_size):
                yield _stack(propagate(exs, images, frozen, patch_cfg))

        val = _stack(propagate(val_exs, images, frozen, patch_cfg)) if val_exs else None
        res = fit(net, batches(), stage_cfg, val, out_dir, stage_tag=f"_stage{k + 1}",
                   stream=stream, ckpt_name=f"checkpoint_stage{k + 1}.sirw")
        results.append(res)
        nets.append(net)
    if out_dir:
        save_networks(Path(out_dir) / "checkpoint.sirw", nets, extra_meta)
    return results
