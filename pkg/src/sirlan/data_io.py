"""Dataset manifests, pts annotations and prediction output.

Manifest (JSON)::

    {
      "schema_version": 1,
      "entries": [{"id": "img0", "image": "img0.ppm",
                   "annotation": "img0.pts", "face_box": [x, y, w, h]}, ...],
      "counts": {"entries": N},
      "recommended": {"face_size": 64, "patch_size": 17},   # optional
      "synthetic": {...}                                      # optional
    }

Paths are relative to the manifest's directory. ``face_box`` may be omitted,
in which case the landmark bounding box grown by 20% is used.
"""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .errors import DataError
from .patches import load_image, normalize_face, write_pnm
from .sampling import Sample
from .shape_model import ShapeModel, shape_to_params

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


def read_pts(path) -> np.ndarray:
    """Parse a pts file: optional ``version``, ``n_points: M``, then ``{``, M ``x y`` lines, ``}``."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"{path}: cannot read annotation ({exc})") from exc
    n = None
    pts = []
    for lineno, line in enumerate(lines, 1):
        s = line.strip()
        if not s or s in ("{", "}") or s.startswith("version"):
            continue
        if s.startswith("n_points"):
            try:
                n = int(s.split(":")[1])
            except (IndexError, ValueError):
                raise DataError(f"{path}:{lineno}: malformed point-count header {s!r}")
            continue
        parts = s.split()
        try:
            if len(parts) != 2:
                raise ValueError
            pts.append((float(parts[0]), float(parts[1])))
        except ValueError:
            raise DataError(f"{path}:{lineno}: expected 'x y', got {s!r}")
    if n is None:
        raise DataError(f"{path}: missing n_points header")
    if len(pts) != n:
        raise DataError(f"{path}: header declares {n} points, found {len(pts)}")
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def write_pts(path, points) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    lines = ["version: 1", f"n_points: {len(pts)}", "{"]
    lines += [f"{float(x)!r} {float(y)!r}" for x, y in pts]
    lines.append("}")
    Path(path).write_text("\n".join(lines) + "\n")


def fallback_box(points, grow: float = 0.2) -> tuple[float, float, float, float]:
    pts = np.asarray(points)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    size = hi - lo
    lo = lo - size * grow / 2
    size = size * (1 + grow)
    return (float(lo[0]), float(lo[1]), float(size[0]), float(size[1]))


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot parse manifest ({exc})") from exc
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported schema version {manifest.get('schema_version')}")
    return manifest


def write_manifest(path, entries, extra: dict | None = None) -> None:
    doc = {"schema_version": SCHEMA_VERSION, "entries": list(entries),
           "counts": {"entries": len(entries)}}
    doc.update(extra or {})
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_dataset(manifest_path, model: ShapeModel | None = None, face_size: int = 256,
                 margin: float = 0.1, require_annotations: bool = True) -> list[Sample]:
    """Load, normalise and (given a model) fit ground-truth parameters.

    Order follows the manifest.
    """
    manifest_path = Path(manifest_path)
    manifest = read_manifest(manifest_path)
    root = manifest_path.parent
    entries = manifest.get("entries", [])
    if not entries:
        log.warning("%s: manifest has no entries", manifest_path)
    out = []
    for k, entry in enumerate(entries):
        name = entry.get("id", f"entry{k}")
        img_path = root / entry["image"]
        if not img_path.exists():
            raise DataError(f"{manifest_path}: entry {name}: missing image {img_path}")
        raw = None
        ann = entry.get("annotation")
        if ann:
            ann_path = root / ann
            if not ann_path.exists():
                raise DataError(f"{manifest_path}: entry {name}: missing annotation {ann_path}")
            raw = read_pts(ann_path)
            if model is not None and len(raw) != model.n_landmarks:
                raise DataError(f"{ann_path}: {len(raw)} points, model expects {model.n_landmarks}")
        elif require_annotations:
            raise DataError(f"{manifest_path}: entry {name} has no annotation")
        box = entry.get("face_box")
        if box is None:
            if raw is None:
                raise DataError(f"{manifest_path}: entry {name} has neither face box nor landmarks")
            box = fallback_box(raw)
        image = load_image(img_path, box, name)
        face, lms, tf = normalize_face(image, raw, face_size, margin)
        params = shape_to_params(lms, model) if (model is not None and lms is not None) else None
        out.append(Sample(face, lms, params, name, tf))
    return out


def write_predictions(results, out_dir) -> list[Path]:
    """``results`` yields ``(name, landmarks_in_face_frame, FaceTransform)``.

    Writes ``<name>.pts`` in raw-image coordinates.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from exc
    paths = []
    for name, pts, tf in results:
        raw = tf.inverse(pts) if tf is not None else np.asarray(pts)
        path = out_dir / f"{name}.pts"
        try:
            write_pts(path, raw)
        except OSError as exc:
            raise DataError(f"cannot write {path}: {exc}") from exc
        paths.append(path)
    return paths


def write_synthetic(out_dir, samples, spec_dict: dict | None = None,
                    recommended: dict | None = None) -> Path:
    """Write ``(Image, landmarks)`` pairs as P5/P6 + pts + manifest.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for image, pts in samples:
        ext = "ppm" if image.channels == 3 else "pgm"
        write_pnm(out_dir / f"{image.name}.{ext}", image.pixels)
        write_pts(out_dir / f"{image.name}.pts", pts)
        entries.append({"id": image.name, "image": f"{image.name}.{ext}",
                        "annotation": f"{image.name}.pts", "face_box": list(image.face_box)})
    extra = {}
    if spec_dict is not None:
        extra["synthetic"] = spec_dict
    if recommended is not None:
        extra["recommended"] = recommended
    path = out_dir / "manifest.json"
    write_manifest(path, entries, extra)
    return path

