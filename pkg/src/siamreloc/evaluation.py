"""Median-error evaluation and cross-scene averaging."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Scene
from .errors import EmptyTestSplit, MalformedLine
from .pose import angular_error_deg, canonicalize_hemisphere, position_error_m, quat_normalize


@dataclass
class SceneResult:
    scene: str
    median_position_error: float
    median_orientation_error: float
    frame_ids: list[str]
    position_errors: np.ndarray
    orientation_errors: np.ndarray

    def to_dict(self) -> dict:
        return {
            "scene": self.scene,
            "median_position_error_m": round(self.median_position_error, 3),
            "median_orientation_error_deg": round(self.median_orientation_error, 2),
            "frames": [
                {"id": fid, "position_error_m": float(p), "orientation_error_deg": float(o)}
                for fid, p, o in zip(self.frame_ids, self.position_errors, self.orientation_errors)
            ],
        }


def evaluate_predictions(scene: Scene, positions, quaternions) -> SceneResult:
    """Score predicted poses (row-aligned with ``scene.frames``) against ground truth."""
    if len(scene) == 0:
        raise EmptyTestSplit(f"scene {scene.name!r} has no frames")
    positions = np.asarray(positions, dtype=np.float64).reshape(len(scene), 3)
    quats = canonicalize_hemisphere(quat_normalize(np.asarray(quaternions, dtype=np.float64).reshape(len(scene), 4)))
    pos_err = position_error_m(positions, scene.positions())
    ort_err = angular_error_deg(quats, scene.quaternions())
    return SceneResult(
        scene.name,
        float(np.median(pos_err)),
        float(np.median(ort_err)),
        [f.id for f in scene.frames],
        pos_err,
        ort_err,
    )


def evaluate(model, scene: Scene) -> SceneResult:
    """Run single-twin inference on every frame of ``scene`` and score it."""
    if len(scene) == 0:
        raise EmptyTestSplit(f"scene {scene.name!r} has no frames")
    x, q = model.predict_arrays(scene.descriptors())
    return evaluate_predictions(scene, x, q)


def average_over_scenes(results) -> tuple[float, float]:
    """Unweighted mean of per-scene median errors (meters, degrees)."""
    results = list(results)
    if not results:
        raise ValueError("no scene results to average")
    pos = [r.median_position_error if isinstance(r, SceneResult) else r[0] for r in results]
    ort = [r.median_orientation_error if isinstance(r, SceneResult) else r[1] for r in results]
    return float(np.mean(pos)), float(np.mean(ort))


def read_predictions(path, scene: Scene) -> tuple[np.ndarray, np.ndarray]:
    """Read ``frame_id x y z w p q r`` lines and align them with ``scene``."""
    preds = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        if len(tok) != 8:
            raise MalformedLine(f"{path}:{lineno}: expected frame_id and 7 numbers")
        try:
            preds[tok[0]] = np.array([float(t) for t in tok[1:]])
        except ValueError:
            raise MalformedLine(f"{path}:{lineno}: non-numeric value") from None
    missing = [f.id for f in scene.frames if f.id not in preds]
    if missing:
        raise MalformedLine(f"{path}: no prediction for {len(missing)} frames (first: {missing[0]})")
    rows = np.array([preds[f.id] for f in scene.frames])
    return rows[:, :3], rows[:, 3:]


def write_results(results, out_dir, stem: str = "results"):
    """Write per-scene summaries to CSV and full per-frame dumps to JSON."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = sorted(results, key=lambda r: r.scene)
    with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene", "median_pos_m", "median_ort_deg"])
        for r in results:
            w.writerow([r.scene, f"{r.median_position_error:.3f}", f"{r.median_orientation_error:.2f}"])
        if len(results) > 1:
            p, o = average_over_scenes(results)
            w.writerow(["Average", f"{p:.3f}", f"{o:.2f}"])
    (out_dir / f"{stem}.json").write_text(json.dumps([r.to_dict() for r in results], indent=1))
