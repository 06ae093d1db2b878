"""Command-line entry point: ``sirlan <subcommand> [flags]``.

Every subcommand writes ``run_config.json`` into its output directory. The
``replay`` subcommand re-executes a snapshot, optionally into a new directory.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure. The thread count
for BLAS is taken from ``SIRLAN_NUM_THREADS``; ``--deterministic`` forces 1.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .data_io import load_dataset, read_manifest, read_pts, write_predictions, write_synthetic
from .errors import DataError, NumericError, SirError
from .experiments import Benchmark, DeskConfig, iterate_and_score, sigma_sweep
from .inference import batch_iterate, initial_location
from .metrics import DEFAULT_THRESHOLD, evaluate
from .networks import LanSpec, StackSpec, load_networks
from .patches import PatchConfig
from .sampling import SamplingConfig, TrainingStream
from .shape_model import ShapeModel, fit_pca
from .synthetic import SyntheticSpec, generate_dataset
from .train import TrainConfig, train_cr_baseline, train_sir

log = logging.getLogger("sirlan")

THREADS_ENV = "SIRLAN_NUM_THREADS"
SNAPSHOT = "run_config.json"
DEFAULT_FACE_SIZE = 256
DEFAULT_PATCH_SIZE = 57


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ---------------------------------------------------------------- helpers

def _recommended(manifest_path) -> dict:
    return read_manifest(manifest_path).get("recommended", {})


def _resolve_sizes(args, manifest_path):
    rec = _recommended(manifest_path)
    if getattr(args, "face_size", None) is None:
        args.face_size = int(rec.get("face_size", DEFAULT_FACE_SIZE))
    if hasattr(args, "patch_size") and args.patch_size is None:
        args.patch_size = int(rec.get("patch_size", DEFAULT_PATCH_SIZE))


def _load_model(path) -> ShapeModel:
    if not Path(path).exists():
        raise DataError(f"missing shape model {path}")
    return ShapeModel.load(path)


def _load_weights(path, model: ShapeModel):
    if not Path(path).exists():
        raise DataError(f"missing weights {path}")
    nets, meta = load_networks(path)
    if model.n_landmarks != nets[0].spec.landmark_count:
        raise DataError(f"shape model has {model.n_landmarks} landmarks, weights expect "
                        f"{nets[0].spec.landmark_count}")
    return nets, meta


def _check_channels(samples, nets) -> None:
    if _channels(samples) != nets[0].spec.channels:
        raise DataError(f"images have {_channels(samples)} channels, weights expect "
                        f"{nets[0].spec.channels}")


def _channels(samples) -> int:
    if not samples:
        raise DataError("dataset is empty")
    return samples[0].image.channels


def _write_csv(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _write_json(path, doc) -> Path:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return Path(path)


def _train_config(args) -> TrainConfig:
    return TrainConfig(batch_size=args.batch, max_steps=args.steps, learning_rate=args.lr,
                       weight_decay=args.weight_decay, seed=args.seed,
                       validation_fraction=args.val_fraction,
                       sampling=SamplingConfig(args.sigma, args.mixture_weight, seed=args.seed))


def _net_spec(args, n_landmarks: int, channels: int):
    lan = LanSpec(n_landmarks, args.patch_size, channels)
    return StackSpec.matched_to(lan) if getattr(args, "network", "lan") == "stack" else lan


def _plot(fn, *a, **kw):
    from . import plotting
    return getattr(plotting, fn)(*a, **kw)


# ------------------------------------------------------------ subcommands

def cmd_synth(args) -> None:
    spec = SyntheticSpec(landmark_count=args.landmarks, image_size=args.image_size,
                         shape_components=args.components, seed=args.seed, count=args.count,
                         noise=args.noise, channels=args.channels, patch_size=args.patch_size)
    write_synthetic(args.out, generate_dataset(spec), spec.to_dict(),
                    {"face_size": args.face_size, "patch_size": args.patch_size})
    log.info("wrote %d images to %s", args.count, args.out)


def cmd_fit_model(args) -> None:
    _resolve_sizes(args, args.data)
    samples = load_dataset(args.data, face_size=args.face_size)
    model = fit_pca([s.landmarks for s in samples], args.variance_keep)
    model.save(Path(args.out) / "shape_model.sirm")
    log.info("shape model: %d landmarks, %d components", model.n_landmarks, model.n_components)


def _training_data(args):
    _resolve_sizes(args, args.data)
    model = _load_model(args.model)
    samples = load_dataset(args.data, model, args.face_size)
    return model, samples


def cmd_train_sir(args) -> None:
    model, samples = _training_data(args)
    spec = _net_spec(args, model.n_landmarks, _channels(samples))
    res = train_sir(samples, model, spec, _train_config(args), args.out,
                    extra_meta={"face_size": args.face_size})
    _plot("plot_loss", res.log, Path(args.out) / "loss.png")


def cmd_train_cr(args) -> None:
    model, samples = _training_data(args)
    spec = LanSpec(model.n_landmarks, args.patch_size, _channels(samples))
    results = train_cr_baseline(samples, model, spec, args.stages, _train_config(args), args.out,
                                extra_meta={"face_size": args.face_size})
    records = [dict(r, stage=f"stage{k + 1}") for k, res in enumerate(results) for r in res.log]
    _plot("plot_loss", records, Path(args.out) / "loss.png")


def _steps_for(nets, iterations):
    """Self-iteration for a single regressor, stage order for a cascade."""
    if len(nets) == 1:
        return nets * iterations
    if iterations > len(nets):
        raise DataError(f"cascade has {len(nets)} stages, cannot run {iterations} iterations")
    return nets[:iterations]


def cmd_detect(args) -> None:
    model = _load_model(args.model)
    nets, meta = _load_weights(args.weights, model)
    if args.face_size is None:
        args.face_size = int(meta.get("face_size", DEFAULT_FACE_SIZE))
    if args.iters is None:
        args.iters = 4 if len(nets) == 1 else len(nets)
    samples = load_dataset(args.images, face_size=args.face_size, require_annotations=False)
    _check_channels(samples, nets)
    images = [s.image for s in samples]
    steps = batch_iterate(images, _steps_for(nets, args.iters),
                          [initial_location(im, model) for im in images])
    out = Path(args.out)
    write_predictions([(s.name, steps[-1][i], s.transform) for i, s in enumerate(samples)], out)
    if args.trace:
        rows = []
        for i, s in enumerate(samples):
            for k, thetas in enumerate(steps):
                raw = s.transform.inverse(thetas[i])
                rows.extend((s.name, k, j, repr(float(x)), repr(float(y))) for j, (x, y) in enumerate(raw))
        _write_csv(out / "trace.csv", ["imageId", "iteration", "landmarkIndex", "x", "y"], rows)


def _parse_subset(text):
    if text is None:
        return None
    if ":" in text:
        lo, hi = text.split(":")
        return list(range(int(lo), int(hi)))
    return [int(t) for t in text.split(",")]


def cmd_eval(args) -> None:
    manifest_path = Path(args.gt)
    manifest = read_manifest(manifest_path)
    names, preds, gts = [], [], []
    for k, entry in enumerate(manifest.get("entries", [])):
        name = entry.get("id", f"entry{k}")
        if not entry.get("annotation"):
            raise DataError(f"{manifest_path}: entry {name} has no annotation")
        pred_path = Path(args.pred) / f"{name}.pts"
        if not pred_path.exists():
            raise DataError(f"missing prediction {pred_path}")
        names.append(name)
        preds.append(read_pts(pred_path))
        gts.append(read_pts(manifest_path.parent / entry["annotation"]))
    if not names:
        raise DataError(f"{manifest_path}: nothing to evaluate")
    for name, p, g in zip(names, preds, gts):
        if p.shape != g.shape:
            raise DataError(f"{name}: prediction has {len(p)} points, ground truth {len(g)}")
    report = evaluate(preds, gts, args.normalization, args.threshold,
                      subset=_parse_subset(args.subset), names=names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", report.to_dict())
    _write_csv(out / "ced.csv", ["error", "fraction"], report.ced_samples)
    _write_csv(out / "per_image.csv", ["imageId", "nme"],
               [(n, repr(e)) for n, e in zip(names, report.per_image_nme)])
    _plot("plot_ced", {args.label: report.ced_samples}, out / "ced.png", args.threshold)
    log.info("mean NME %.5f  AUC %.4f  FR %.4f", report.mean_nme, report.auc, report.failure_rate)


def cmd_ced_export(args) -> None:
    labels = args.labels or [Path(r).parent.name or Path(r).stem for r in args.reports]
    if len(labels) != len(args.reports):
        raise UsageError("--labels must match --reports in number")
    curves, rows, summary = {}, [], []
    for label, path in zip(labels, args.reports):
        try:
            rep = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: cannot read report ({exc})") from exc
        curves[label] = rep["ced_samples"]
        rows.extend((label, e, f) for e, f in rep["ced_samples"])
        summary.append((label, rep["mean_nme"], rep["auc"], rep["failure_rate"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "ced_compare.csv", ["label", "error", "fraction"], rows)
    _write_csv(out / "summary.csv", ["label", "mean_nme", "auc", "failure_rate"], summary)
    _plot("plot_ced", curves, out / "ced_compare.png")


def cmd_sample_dump(args) -> None:
    _resolve_sizes(args, args.data)
    model = _load_model(args.model)
    samples = load_dataset(args.data, model, args.face_size)
    cfg = SamplingConfig(args.sigma, args.mixture_weight, args.periods, args.seed)
    stream = TrainingStream(samples, model, cfg, PatchConfig(args.patch_size, _channels(samples)))
    by_name = {s.name: s for s in samples}
    rows, cloud = [], []
    for draw, ex in enumerate(stream):
        branch = "mean" if ex.from_mean else "gt"
        raw = by_name[ex.source].transform.inverse(ex.theta)
        rows.extend((draw, ex.source, j, repr(float(x)), repr(float(y)), branch)
                    for j, (x, y) in enumerate(raw))
        if ex.source == samples[0].name:
            cloud.append((ex.theta, branch))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "samples.csv", ["draw", "imageId", "landmarkIndex", "x", "y", "branch"], rows)
    first = samples[0]
    _plot("plot_sample_cloud", first.image.pixels, first.landmarks,
          [c[0] for c in cloud], [c[1] for c in cloud], out / "sample_cloud.png")


def _desk_config(args, channels: int) -> DeskConfig:
    return DeskConfig(face_size=args.face_size, patch_size=args.patch_size, steps=args.steps,
                      batch_size=args.batch, learning_rate=args.lr,
                      weight_decay=args.weight_decay, mixture_weight=args.mixture_weight,
                      seed=args.seed, iterations=args.iters, channels=channels)


def cmd_sweep_sigma(args) -> None:
    model, train = _training_data(args)
    test = load_dataset(args.test_data, model, args.face_size)
    cfg = _desk_config(args, _channels(train))
    results = sigma_sweep(Benchmark(train, test, model), cfg, args.sigmas, out_dir=args.out)
    out = Path(args.out)
    rows = [(s, repr(r.final_nme), repr(r.nme_per_iteration[0])) for s, r in results.items()]
    _write_csv(out / "sweep_sigma.csv", ["sigma", "mean_nme", "initial_nme"], rows)
    _plot("plot_series", list(results), {"SIR": [r.final_nme for r in results.values()]},
          out / "sweep_sigma.png", "sigma", logx=True)


def cmd_sweep_iters(args) -> None:
    model = _load_model(args.model)
    nets, meta = _load_weights(args.weights, model)
    if args.face_size is None:
        args.face_size = int(meta.get("face_size", DEFAULT_FACE_SIZE))
    samples = load_dataset(args.data, model, args.face_size)
    _check_channels(samples, nets)
    scores, norms = iterate_and_score(samples, model, _steps_for(nets, args.kmax))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [(k, repr(s), repr(norms[k - 1]) if k else "0.0") for k, s in enumerate(scores)]
    _write_csv(out / "sweep_iters.csv", ["K", "mean_nme", "mean_increment_norm"], rows)
    _plot("plot_series", list(range(len(scores))), {"mean NME": scores},
          out / "sweep_iters.png", "iterations K")


COMMANDS = {
    "synth": cmd_synth,
    "fit-model": cmd_fit_model,
    "train-sir": cmd_train_sir,
    "train-cr": cmd_train_cr,
    "detect": cmd_detect,
    "eval": cmd_eval,
    "sample-dump": cmd_sample_dump,
    "ced-export": cmd_ced_export,
    "sweep-sigma": cmd_sweep_sigma,
    "sweep-iters": cmd_sweep_iters,
}


# ----------------------------------------------------------------- parser

def _common(p, out_help="output directory"):
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("--deterministic", action="store_true", help="single-threaded BLAS")
    p.add_argument("-v", "--verbose", action="store_true")


def _training_flags(p):
    p.add_argument("--data", required=True, help="training manifest")
    p.add_argument("--model", required=True, help="shape model file")
    p.add_argument("--patch-size", type=int, default=None)
    p.add_argument("--face-size", type=int, default=None)
    p.add_argument("--sigma", type=float, default=0.2)
    p.add_argument("--mixture-weight", type=float, default=0.5)
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--weight-decay", type=float, default=1e-4)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sirlan", description="Self-iterative landmark regression.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic landmark dataset")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--landmarks", type=int, default=5)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--components", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.03)
    p.add_argument("--channels", type=int, choices=(1, 3), default=3)
    p.add_argument("--patch-size", type=int, default=17)
    p.add_argument("--face-size", type=int, default=64)
    _common(p)

    p = sub.add_parser("fit-model", help="fit the PCA shape model")
    p.add_argument("--data", required=True)
    p.add_argument("--face-size", type=int, default=None)
    p.add_argument("--variance-keep", type=float, default=0.98)
    _common(p)

    p = sub.add_parser("train-sir", help="train one self-iterated regressor")
    _training_flags(p)
    p.add_argument("--network", choices=("lan", "stack"), default="lan")
    _common(p)

    p = sub.add_parser("train-cr", help="train the cascaded baseline")
    _training_flags(p)
    p.add_argument("--stages", type=int, default=4)
    _common(p)

    p = sub.add_parser("detect", help="locate landmarks")
    p.add_argument("--weights", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True, help="manifest of images to process")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--face-size", type=int, default=None)
    p.add_argument("--trace", action="store_true", help="write per-iteration landmarks as CSV")
    _common(p, "directory for pts predictions")

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="directory of pts predictions")
    p.add_argument("--gt", required=True, help="ground-truth manifest")
    p.add_argument("--normalization", choices=("inter-pupil", "inter-ocular"), default="inter-pupil")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--subset", default=None, help="landmark indices 'a:b' or 'i,j,k'")
    p.add_argument("--label", default="predictions")
    _common(p)

    p = sub.add_parser("sample-dump", help="write sampled landmark sets as CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--sigma", type=float, default=0.2)
    p.add_argument("--mixture-weight", type=float, default=0.5)
    p.add_argument("--periods", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--face-size", type=int, default=None)
    p.add_argument("--patch-size", type=int, default=None)
    _common(p)

    p = sub.add_parser("ced-export", help="merge CED curves of several reports")
    p.add_argument("--reports", nargs="+", required=True)
    p.add_argument("--labels", nargs="+", default=None)
    _common(p)

    p = sub.add_parser("sweep-sigma", help="train and evaluate over a sigma grid")
    _training_flags(p)
    p.add_argument("--test-data", required=True, help="held-out manifest")
    p.add_argument("--sigmas", type=float, nargs="+", default=[0.05, 0.1, 0.2, 0.4])
    p.add_argument("--iters", type=int, default=4)
    _common(p)

    p = sub.add_parser("sweep-iters", help="NME after K = 0..Kmax iterations")
    p.add_argument("--weights", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="held-out manifest")
    p.add_argument("--kmax", type=int, default=8)
    p.add_argument("--face-size", type=int, default=None)
    _common(p)

    p = sub.add_parser("replay", help="re-run a config snapshot")
    p.add_argument("config", help=f"path to a {SNAPSHOT}")
    p.add_argument("--out", default=None, help="write into this directory instead")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


# -------------------------------------------------------------- execution

_PATH_KEYS = ("out", "data", "model", "weights", "images", "pred", "gt", "test_data")


def _absolutize(args) -> None:
    for key in _PATH_KEYS:
        if getattr(args, key, None) is not None:
            setattr(args, key, str(Path(getattr(args, key)).resolve()))
    if getattr(args, "reports", None):
        args.reports = [str(Path(r).resolve()) for r in args.reports]


def _snapshot(args) -> dict:
    return {"subcommand": args.command, "version": __version__,
            "args": {k: v for k, v in sorted(vars(args).items()) if k != "command"}}


def _execute(args) -> None:
    _absolutize(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    COMMANDS[args.command](args)
    # written last so that it records sizes resolved from manifests and checkpoints
    _write_json(out / SNAPSHOT, _snapshot(args))


def _replay(args) -> None:
    try:
        snap = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{args.config}: cannot read config snapshot ({exc})") from exc
    if snap.get("subcommand") not in COMMANDS:
        raise DataError(f"{args.config}: unknown subcommand {snap.get('subcommand')!r}")
    ns = argparse.Namespace(command=snap["subcommand"], **snap["args"])
    if args.out:
        ns.out = args.out
    with _thread_limit(ns):
        _execute(ns)


def _thread_limit(args):
    from threadpoolctl import threadpool_limits
    if getattr(args, "deterministic", False):
        return threadpool_limits(limits=1)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return threadpool_limits(limits=int(env))
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}")
    return threadpool_limits(limits=None)


def run(argv=None) -> int:
    """Parse ``argv`` and run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with _thread_limit(args):
            if args.command == "replay":
                _replay(args)
            else:
                _execute(args)
        return 0
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, SirError, OSError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
