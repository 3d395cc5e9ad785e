"""Scenes, pose-file I/O, reference pairing and synthetic scene generation."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    InfeasibleAliasing,
    MalformedLine,
    MalformedPoseFile,
    SequenceTooShort,
    ZeroNormQuaternion,
)
from .pose import (
    Pose,
    RelativePose,
    canonicalize_hemisphere,
    quat_from_matrix,
    quat_multiply,
    quat_normalize,
    quat_to_matrix,
    relative_pose,
)


@dataclass(frozen=True)
class Frame:
    id: str
    sequence_id: str
    descriptor: np.ndarray
    pose: Pose


@dataclass(frozen=True)
class Scene:
    """Frames grouped by sequence, kept in capture order."""

    name: str
    frames: tuple[Frame, ...]
    split: str = "train"
    aliased_pairs: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        ids = [f.id for f in self.frames]
        if len(set(ids)) != len(ids):
            raise ValueError(f"scene {self.name!r} has duplicate frame ids")
        object.__setattr__(self, "_index", {fid: i for i, fid in enumerate(ids)})

    def __len__(self):
        return len(self.frames)

    def frame(self, frame_id: str) -> Frame:
        return self.frames[self._index[frame_id]]

    def index_of(self, frame_id: str) -> int:
        return self._index[frame_id]

    def sequences(self) -> dict[str, list[int]]:
        seqs: dict[str, list[int]] = {}
        for i, f in enumerate(self.frames):
            seqs.setdefault(f.sequence_id, []).append(i)
        return seqs

    def positions(self) -> np.ndarray:
        return np.array([f.pose.position for f in self.frames])

    def quaternions(self) -> np.ndarray:
        return np.array([f.pose.orientation for f in self.frames])

    def descriptors(self) -> np.ndarray:
        return np.array([f.descriptor for f in self.frames])


@dataclass(frozen=True)
class TrainingPairSpec:
    current_frame_id: str
    reference_frame_id: str
    gt_rel: RelativePose


def _make_pair(scene: Scene, cur: int, ref: int) -> TrainingPairSpec:
    a, b = scene.frames[cur], scene.frames[ref]
    return TrainingPairSpec(a.id, b.id, relative_pose(a.pose, b.pose))


# ---------------------------------------------------------------- pairing


def pair_next(scene: Scene) -> list[TrainingPairSpec]:
    """Pair each frame with the next one in its sequence.

    The last frame of a sequence has no successor and is paired with its
    predecessor instead, so every frame gets exactly one reference.
    """
    pairs = []
    for seq_id, idx in scene.sequences().items():
        if len(idx) < 2:
            raise SequenceTooShort(f"sequence {seq_id!r} needs at least 2 frames")
        for k, i in enumerate(idx):
            ref = idx[k + 1] if k + 1 < len(idx) else idx[k - 1]
            pairs.append(_make_pair(scene, i, ref))
    return pairs


def _derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    # rejection sampling; acceptance probability tends to 1/e
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def pair_random(scene: Scene, rng_seed: int = 0, within_sequence: bool = False) -> list[TrainingPairSpec]:
    """Random reference per frame; every frame is used as a reference exactly once."""
    rng = np.random.default_rng(rng_seed)
    if within_sequence:
        groups = list(scene.sequences().values())
    else:
        groups = [list(range(len(scene)))]
    refs = {}
    for idx in groups:
        if len(idx) < 2:
            raise SequenceTooShort("random pairing needs at least 2 frames per group")
        perm = _derangement(len(idx), rng)
        for k, i in enumerate(idx):
            refs[i] = idx[perm[k]]
    return [_make_pair(scene, i, refs[i]) for i in range(len(scene))]


def make_pairs(scene: Scene, strategy: str, rng_seed: int = 0, within_sequence: bool = False):
    if strategy == "next":
        return pair_next(scene)
    if strategy == "random":
        return pair_random(scene, rng_seed, within_sequence)
    raise ValueError(f"unknown pairing strategy {strategy!r}")


def triplet_negatives(scene: Scene, pairs: list[TrainingPairSpec]) -> list[str]:
    """For each pair, the frame after the reference in the reference's sequence.

    Sequences are treated cyclically and the anchor is skipped, so the
    negative always differs from both the anchor and the reference.
    """
    seq_pos = {}
    for idx in scene.sequences().values():
        for k, i in enumerate(idx):
            seq_pos[i] = (idx, k)
    out = []
    for p in pairs:
        cur, ref = scene.index_of(p.current_frame_id), scene.index_of(p.reference_frame_id)
        idx, k = seq_pos[ref]
        if len(idx) < 3:
            raise SequenceTooShort("triplets need sequences of at least 3 frames")
        step = 1
        while True:
            cand = idx[(k + step) % len(idx)]
            if cand not in (cur, ref):
                break
            step += 1
        out.append(scene.frames[cand].id)
    return out


def pair_similarity_stats(scene: Scene, pairs: list[TrainingPairSpec]) -> tuple[float, np.ndarray]:
    """Mean and per-pair Euclidean distance between paired descriptors."""
    if not pairs:
        raise ValueError("no pairs given")
    d = np.array(
        [
            np.linalg.norm(scene.frame(p.current_frame_id).descriptor - scene.frame(p.reference_frame_id).descriptor)
            for p in pairs
        ]
    )
    return float(d.mean()), d


# ---------------------------------------------------------------- 7Scenes


_SEVEN_RE = re.compile(r"frame-(\d+)\.pose\.txt$")


def _read_sidecar(path: Path | None, n: int) -> list[np.ndarray]:
    if path is None or not Path(path).exists():
        return [np.zeros(0)] * n
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if len(rows) != n:
        raise MalformedPoseFile(f"{path}: {len(rows)} descriptor lines for {n} frames")
    return [np.array([float(v) for v in r]) for r in rows]


def _read_7scenes_matrix(path: Path) -> np.ndarray:
    try:
        rows = [[float(v) for v in ln.split()] for ln in path.read_text().splitlines() if ln.strip()]
    except ValueError as exc:
        raise MalformedPoseFile(f"{path}: {exc}") from None
    if len(rows) != 4 or any(len(r) != 4 for r in rows):
        raise MalformedPoseFile(f"{path}: expected 4 lines of 4 numbers")
    T = np.array(rows)
    if not np.all(np.isfinite(T)):
        raise MalformedPoseFile(f"{path}: non-finite entry")
    return T


def _load_7scenes_sequence(directory: Path, seq_id: str) -> list[Frame]:
    files = sorted(
        (int(m.group(1)), p) for p in directory.iterdir() if (m := _SEVEN_RE.search(p.name))
    )
    descs = _read_sidecar(directory / "descriptors.txt", len(files))
    frames = []
    for (num, path), desc in zip(files, descs):
        T = _read_7scenes_matrix(path)
        pose = Pose(T[:3, 3], quat_from_matrix(T[:3, :3]))
        frames.append(Frame(f"{seq_id}/frame-{num:06d}", seq_id, desc, pose))
    return frames


def load_7scenes_poses(directory, name: str | None = None, split: str = "train") -> Scene:
    """Load a directory of ``frame-NNNNNN.pose.txt`` files.

    ``directory`` is either one sequence or a scene folder holding
    ``seq-XX`` subfolders. An optional ``descriptors.txt`` in a sequence
    folder supplies one whitespace-separated descriptor per frame, in frame
    order.
    """
    directory = Path(directory)
    subdirs = sorted(p for p in directory.iterdir() if p.is_dir() and p.name.startswith("seq"))
    frames = []
    if subdirs:
        for sub in subdirs:
            frames.extend(_load_7scenes_sequence(sub, sub.name))
    else:
        frames = _load_7scenes_sequence(directory, directory.name)
    if not frames:
        raise MalformedPoseFile(f"{directory}: no frame-*.pose.txt files")
    return Scene(name or directory.name, frames, split)


def write_7scenes_poses(scene: Scene, directory):
    """Write one ``seq`` folder per sequence with 4x4 pose files and descriptors."""
    directory = Path(directory)
    for seq_id, idx in scene.sequences().items():
        seq_dir = directory / seq_id
        seq_dir.mkdir(parents=True, exist_ok=True)
        for k, i in enumerate(idx):
            T = scene.frames[i].pose.as_matrix()
            text = "\n".join(" ".join(f"{v:.17g}" for v in row) for row in T) + "\n"
            (seq_dir / f"frame-{k:06d}.pose.txt").write_text(text)
        descs = [scene.frames[i].descriptor for i in idx]
        if all(d.size for d in descs):
            (seq_dir / "descriptors.txt").write_text("".join(" ".join(f"{v:.17g}" for v in d) + "\n" for d in descs))


# ---------------------------------------------------------------- Cambridge


_IMAGE_TOKEN = re.compile(r"/|\.[A-Za-z]{2,4}$")


def load_cambridge_poses(path, name: str | None = None, split: str = "train", descriptors=None) -> Scene:
    """Load a Cambridge Landmarks ``dataset_*.txt`` pose list.

    Lines are ``image_path x y z w p q r``; leading lines whose first token
    does not look like an image path are treated as headers. The sequence id
    is the first path component.
    """
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        tokens = line.split()
        if not tokens:
            continue
        if not _IMAGE_TOKEN.search(tokens[0]):
            if records:
                raise MalformedLine(f"{path}:{lineno}: expected an image path, got {tokens[0]!r}")
            continue
        if len(tokens) != 8:
            raise MalformedLine(f"{path}:{lineno}: expected path + 7 numbers, got {len(tokens)} tokens")
        try:
            vals = np.array([float(t) for t in tokens[1:]])
        except ValueError:
            raise MalformedLine(f"{path}:{lineno}: non-numeric pose value") from None
        if not np.all(np.isfinite(vals)):
            raise MalformedLine(f"{path}:{lineno}: non-finite pose value")
        if np.linalg.norm(vals[3:]) <= 1e-12:
            raise ZeroNormQuaternion(f"{path}:{lineno}: zero quaternion")
        records.append((tokens[0], vals))
    descs = _read_sidecar(descriptors, len(records))
    frames = []
    for (img, vals), desc in zip(records, descs):
        seq = img.split("/")[0] if "/" in img else "seq"
        frames.append(Frame(img, seq, desc, Pose(vals[:3], vals[3:])))
    return Scene(name or path.stem, frames, split)


def write_cambridge_poses(scene: Scene, path, header: str = "Visual Landmark Dataset V1\nImageFile, Camera Position [X Y Z W P Q R]\n\n"):
    lines = [header]
    for f in scene.frames:
        vals = np.concatenate([f.pose.position, f.pose.orientation])
        lines.append(f.id + " " + " ".join(f"{v:.17g}" for v in vals) + "\n")
    Path(path).write_text("".join(lines))


# ---------------------------------------------------------------- JSON lines


def write_scene_jsonl(scene: Scene, path):
    with open(path, "w") as fh:
        for f in scene.frames:
            rec = {
                "id": f.id,
                "sequence": f.sequence_id,
                "position": f.pose.position.tolist(),
                "quaternion": f.pose.orientation.tolist(),
                "descriptor": f.descriptor.tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def read_scene_jsonl(path, name: str | None = None, split: str = "train") -> Scene:
    frames = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                r = json.loads(line)
                frames.append(Frame(r["id"], r["sequence"], np.array(r["descriptor"], dtype=np.float64),
                                    Pose(r["position"], r["quaternion"])))
            except (KeyError, ValueError, TypeError) as exc:
                raise MalformedLine(f"{path}:{lineno}: {exc}") from None
    return Scene(name or Path(path).stem, frames, split)


# ---------------------------------------------------------------- synthetic


@dataclass
class SynthSceneConfig:
    """Parameters of a synthetic scene.

    The scene is a box of side ``workspace_extent`` (meters). Descriptors are a
    fixed random-feature map of the pose plus isotropic Gaussian noise. A
    fraction of frames is aliased: its descriptor is overwritten by a
    near-copy of a frame at least ``aliasing_pair_min_distance`` away.
    """

    num_sequences: int = 8
    frames_per_sequence: int = 100
    workspace_extent: float = 2.0
    descriptor_noise_sigma: float = 0.05
    aliasing_fraction: float = 0.1
    aliasing_pair_min_distance: float = 1.0
    rng_seed: int = 0
    descriptor_dim: int = 32
    length_scale: float = 1.0
    step_length: float = 0.05
    yaw_spread_deg: float = 35.0
    yaw_persistence: float = 0.99
    noise_persistence: float = 0.0
    num_test_sequences: int = 2
    name: str = "synth"

    def __post_init__(self):
        if self.num_sequences < 1 or self.frames_per_sequence < 2:
            raise ValueError("need at least one sequence of two frames")
        if not 0.0 <= self.aliasing_fraction < 1.0:
            raise ValueError("aliasing_fraction must lie in [0, 1)")
        if not 0.0 <= self.noise_persistence < 1.0:
            raise ValueError("noise_persistence must lie in [0, 1)")
        if self.workspace_extent <= 0 or self.descriptor_noise_sigma < 0:
            raise ValueError("workspace_extent must be positive and noise non-negative")


@dataclass
class _World:
    """Random-feature appearance model shared by the train and test splits."""

    W_pos: np.ndarray
    W_rot: np.ndarray
    phase: np.ndarray
    extent: float

    @classmethod
    def from_config(cls, cfg: SynthSceneConfig) -> "_World":
        rng = np.random.default_rng([cfg.rng_seed, 0])
        k = cfg.descriptor_dim
        return cls(
            W_pos=rng.normal(size=(3, k)) / cfg.length_scale,
            W_rot=rng.normal(size=(4, k)) * 0.8,
            phase=rng.uniform(0, 2 * np.pi, size=k),
            extent=cfg.workspace_extent,
        )

    def descriptor(self, positions: np.ndarray, quats: np.ndarray) -> np.ndarray:
        return np.cos(positions @ self.W_pos + quats @ self.W_rot + self.phase)


def _axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis / np.linalg.norm(axis)])


def _trajectory(cfg: SynthSceneConfig, rng: np.random.Generator, heading_yaw: float) -> tuple[np.ndarray, np.ndarray]:
    n, ext = cfg.frames_per_sequence, cfg.workspace_extent
    pos = np.empty((n, 3))
    pos[0] = rng.uniform(0.15 * ext, 0.85 * ext, size=3)
    heading = rng.normal(size=3)
    heading /= np.linalg.norm(heading)
    for t in range(1, n):
        heading = heading + 0.35 * rng.normal(size=3)
        heading /= np.linalg.norm(heading)
        nxt = pos[t - 1] + cfg.step_length * heading
        out = (nxt < 0) | (nxt > ext)
        heading[out] *= -1  # bounce off the workspace walls
        pos[t] = np.clip(pos[t - 1] + cfg.step_length * heading, 0.0, ext)

    # yaw is a mean-reverting walk around the scene's viewing direction
    keep = cfg.yaw_persistence
    spread = np.radians(cfg.yaw_spread_deg)
    dev = rng.normal() * spread
    quats = np.empty((n, 4))
    phase = rng.uniform(0, 2 * np.pi)
    for t in range(n):
        dev = keep * dev + np.sqrt(1 - keep**2) * spread * rng.normal()
        pitch = 0.15 * np.sin(0.1 * t + phase)
        q = quat_multiply(_axis_angle([0, 0, 1], heading_yaw + dev), _axis_angle([1, 0, 0], pitch))
        quats[t] = canonicalize_hemisphere(quat_normalize(q))
    return pos, quats


def _sequence_noise(cfg: SynthSceneConfig, rng: np.random.Generator, lengths: list[int], dim: int) -> np.ndarray:
    """Per-frame nuisance: an AR(1) walk along each sequence with marginal std ``descriptor_noise_sigma``."""
    rho = cfg.noise_persistence
    out = []
    for n in lengths:
        white = cfg.descriptor_noise_sigma * rng.normal(size=(n, dim))
        e = white.copy()
        for t in range(1, n):
            e[t] = rho * e[t - 1] + np.sqrt(1 - rho**2) * white[t]
        out.append(e)
    return np.concatenate(out)


def _split_frames(cfg: SynthSceneConfig, world: _World, split: str, n_seq: int):
    rng = np.random.default_rng([cfg.rng_seed, 1 if split == "train" else 2])
    positions, quats, seq_ids, ids = [], [], [], []
    heading = np.random.default_rng([cfg.rng_seed, 0]).uniform(0, 2 * np.pi)
    for s in range(n_seq):
        p, q = _trajectory(cfg, rng, heading)
        positions.append(p)
        quats.append(q)
        seq_ids += [f"{split}-seq{s:02d}"] * len(p)
        ids += [f"{split}-seq{s:02d}/f{t:04d}" for t in range(len(p))]
    positions_per_seq = positions
    positions, quats = np.concatenate(positions), np.concatenate(quats)
    desc = world.descriptor(positions, quats)
    desc += _sequence_noise(cfg, rng, [len(p) for p in positions_per_seq], desc.shape[1])

    n_alias = int(round(cfg.aliasing_fraction * len(positions)))
    aliased = []
    if n_alias:
        if cfg.aliasing_pair_min_distance > np.sqrt(3) * cfg.workspace_extent:
            raise InfeasibleAliasing("workspace too small for the aliasing distance")
        receivers = rng.choice(len(positions), size=n_alias, replace=False)
        is_receiver = np.zeros(len(positions), bool)
        is_receiver[receivers] = True
        for j in receivers:
            dist = np.linalg.norm(positions - positions[j], axis=1)
            cand = np.flatnonzero((dist >= cfg.aliasing_pair_min_distance) & ~is_receiver)
            if cand.size == 0:
                raise InfeasibleAliasing(f"no frame at least {cfg.aliasing_pair_min_distance} m from {ids[j]}")
            i = rng.choice(cand)
            desc[j] = desc[i] + 0.25 * cfg.descriptor_noise_sigma * rng.normal(size=desc.shape[1])
            aliased.append((ids[j], ids[i]))
    frames = [Frame(ids[k], seq_ids[k], desc[k], Pose(positions[k], quats[k])) for k in range(len(ids))]
    return frames, tuple(aliased)


def generate_synth_scene(cfg: SynthSceneConfig, split: str = "train") -> Scene:
    """Generate the train or test split of a synthetic scene.

    Both splits share one appearance model (seeded by ``rng_seed``) but use
    independent trajectories. ``Scene.aliased_pairs`` lists
    ``(aliased_frame, source_frame)`` ids.
    """
    if split not in ("train", "test"):
        raise ValueError("split must be 'train' or 'test'")
    world = _World.from_config(cfg)
    n_seq = cfg.num_sequences if split == "train" else cfg.num_test_sequences
    frames, aliased = _split_frames(cfg, world, split, n_seq)
    return Scene(cfg.name, frames, split, aliased)


def generate_synth_splits(cfg: SynthSceneConfig) -> tuple[Scene, Scene]:
    return generate_synth_scene(cfg, "train"), generate_synth_scene(cfg, "test")
