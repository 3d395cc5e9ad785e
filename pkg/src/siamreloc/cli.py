"""Command-line front end.

Usage::

    siamreloc {train,evaluate,ablate,pair-stats,gradcheck,synth} [--config PATH] [--seed N] [--out DIR]
              [--set KEY=VALUE ...]

Config files are flat ``key = value`` lines. Blank lines and lines starting
with ``#`` are ignored. Values are Python literals (``1e-3``, ``[128, 128]``,
``'next'``, ``True``); anything that is not a literal is kept as a bare
string, which is convenient for paths. Keys are either top-level
(see ``TOP_LEVEL``) or prefixed with ``train.``, ``model.`` or ``synth.`` to
reach a field of :class:`TrainConfig`, :class:`EncoderConfig` or
:class:`SynthSceneConfig`. Unknown and repeated keys are errors. ``--set``
overrides win over the file, and ``--seed``/``--out`` win over both.

One root seed drives every random choice; it is written into every output.
Set ``SIAMRELOC_LOG`` to ``DEBUG``, ``INFO`` or ``WARNING`` (default) for log
verbosity.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 training
diverged, 4 gradient check failed.
"""

from __future__ import annotations

import argparse
import ast
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .checks import LOSS_CHECKS, run_gradcheck_suite
from .dataset import (
    Scene,
    SynthSceneConfig,
    generate_synth_splits,
    load_7scenes_poses,
    load_cambridge_poses,
    make_pairs,
    pair_similarity_stats,
    read_scene_jsonl,
    write_scene_jsonl,
)
from .errors import ConfigError, DivergedLoss, SiamRelocError
from .evaluation import evaluate, evaluate_predictions, read_predictions, write_results
from .losses import COMBINATIONS
from .network import EncoderConfig, SiameseNet
from .trainer import TrainConfig, run_ablation, summarize_ablation, train, write_ablation_csv

log = logging.getLogger("siamreloc")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_CHECK_FAILED = 0, 1, 2, 3, 4

TOP_LEVEL = {
    "seed": 0,
    "out": "out",
    "dataset_format": "synth",  # synth | jsonl | 7scenes | cambridge
    "train_data": None,
    "test_data": None,
    "train_descriptors": None,  # cambridge descriptor sidecars
    "test_descriptors": None,
    "scene_name": None,
    "checkpoint": None,
    "predictions": None,
    "combinations": ["G", "G+C", "G+C+R", "full"],
    "seeds": None,  # ablation seeds; default: five seeds starting at the root seed
    "workers": 1,
    "gradcheck_points": 100,
}
SECTIONS = {"train": TrainConfig, "model": EncoderConfig, "synth": SynthSceneConfig}
# the root seed owns these
_SEED_FIELDS = {"train.rng_seed", "synth.rng_seed"}


@dataclasses.dataclass
class RunConfig:
    values: dict
    train: dict
    model: dict
    synth: dict

    def __getitem__(self, key):
        return self.values[key]

    def train_config(self, **overrides) -> TrainConfig:
        return TrainConfig(**{**self.train, "rng_seed": self["seed"], **overrides})

    def encoder_config(self, input_dim: int) -> EncoderConfig:
        return EncoderConfig(**{"input_dim": input_dim, **self.model})

    def synth_config(self, seed: int | None = None) -> SynthSceneConfig:
        return SynthSceneConfig(**{**self.synth, "rng_seed": self["seed"] if seed is None else seed})

    def record(self) -> dict:
        """Everything needed to rerun, for the run manifest (the output path is left out)."""
        top = {k: v for k, v in self.values.items() if k != "out"}
        return {"top_level": top, "train": self.train, "model": self.model, "synth": self.synth}


def _parse_value(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_assignments(lines, source: str) -> dict:
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: repeated key {key!r}")
        out[key] = _parse_value(value.strip())
    return out


def _field_names(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def build_run_config(path: str | None, overrides=(), seed: int | None = None, out: str | None = None) -> RunConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw = parse_assignments(p.read_text().splitlines(), str(path))
    raw.update(parse_assignments(overrides, "--set"))
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = out

    values = dict(TOP_LEVEL)
    sections = {name: {} for name in SECTIONS}
    for key, value in raw.items():
        if key in _SEED_FIELDS:
            raise ConfigError(f"{key!r} is set by the root 'seed' key")
        prefix, dot, field = key.partition(".")
        if dot and prefix in SECTIONS:
            if field not in _field_names(SECTIONS[prefix]):
                raise ConfigError(f"unknown key {key!r}")
            sections[prefix][field] = value
        elif key in TOP_LEVEL:
            values[key] = value
        else:
            raise ConfigError(f"unknown key {key!r}")
    if not isinstance(values["seed"], int):
        raise ConfigError("seed must be an integer")
    cfg = RunConfig(values, sections["train"], sections["model"], sections["synth"])
    # fail early on bad field values
    try:
        cfg.train_config()
        cfg.synth_config()
        cfg.encoder_config(1)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


# ---------------------------------------------------------------- data


def load_splits(cfg: RunConfig, seed: int | None = None) -> tuple[Scene, Scene]:
    fmt = cfg["dataset_format"]
    if fmt == "synth":
        return generate_synth_splits(cfg.synth_config(seed))
    train_path, test_path = cfg["train_data"], cfg["test_data"]
    if train_path is None or test_path is None:
        raise ConfigError(f"dataset_format {fmt!r} needs train_data and test_data")
    name = cfg["scene_name"]
    for p in (train_path, test_path):
        if not Path(p).exists():
            raise FileNotFoundError(f"data path not found: {p}")
    if fmt == "jsonl":
        return read_scene_jsonl(train_path, name, "train"), read_scene_jsonl(test_path, name, "test")
    if fmt == "7scenes":
        return load_7scenes_poses(train_path, name, "train"), load_7scenes_poses(test_path, name, "test")
    if fmt == "cambridge":
        return (load_cambridge_poses(train_path, name, "train", cfg["train_descriptors"]),
                load_cambridge_poses(test_path, name, "test", cfg["test_descriptors"]))
    raise ConfigError(f"unknown dataset_format {fmt!r}")


def _descriptor_dim(scene: Scene) -> int:
    dims = {f.descriptor.size for f in scene.frames}
    if len(dims) != 1 or 0 in dims:
        raise SiamRelocError(f"scene {scene.name!r} needs one descriptor of fixed width per frame")
    return dims.pop()


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc):
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _manifest(out: Path, command: str, cfg: RunConfig, **extra):
    _write_json(out / f"{command}.run.json", {"command": command, "seed": cfg["seed"], "config": cfg.record(), **extra})


# ---------------------------------------------------------------- commands


def cmd_train(cfg: RunConfig) -> int:
    train_scene, _ = load_splits(cfg)
    out = _out_dir(cfg)
    encoder = cfg.encoder_config(_descriptor_dim(train_scene))
    _, _, report = train(train_scene, cfg.train_config(), encoder, checkpoint=out / "checkpoint.json")
    (out / "train_report.json").write_text(report.to_json() + "\n")
    _manifest(out, "train", cfg)
    final = f"; final loss {report.loss_curve[-1]:.6f}" if report.loss_curve else ""
    print(f"trained {report.epochs_run} epochs ({report.stop_reason}){final}")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    _, test_scene = load_splits(cfg)
    out = _out_dir(cfg)
    if cfg["predictions"] is not None:
        x, q = read_predictions(cfg["predictions"], test_scene)
        result = evaluate_predictions(test_scene, x, q)
    elif cfg["checkpoint"] is not None:
        if not Path(cfg["checkpoint"]).is_file():
            raise FileNotFoundError(f"checkpoint not found: {cfg['checkpoint']}")
        result = evaluate(SiameseNet.load(cfg["checkpoint"], inference_only=True), test_scene)
    else:
        raise ConfigError("evaluate needs a 'checkpoint' or 'predictions' key")
    write_results([result], out)
    _manifest(out, "evaluate", cfg)
    print(f"{result.scene}: {result.median_position_error:.3f} m, {result.median_orientation_error:.2f} deg")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig) -> int:
    combos = cfg["combinations"]
    if isinstance(combos, str):
        combos = [c.strip() for c in combos.split(",")]
    unknown = [c for c in combos if c not in COMBINATIONS]
    if unknown:
        raise ConfigError(f"unknown combinations {unknown}; choose from {COMBINATIONS}")
    seeds = cfg["seeds"] if cfg["seeds"] is not None else list(range(cfg["seed"], cfg["seed"] + 5))
    scenes = _SynthScenes(cfg) if cfg["dataset_format"] == "synth" else load_splits(cfg)
    train_scene = scenes(seeds[0])[0] if callable(scenes) else scenes[0]
    encoder = cfg.encoder_config(_descriptor_dim(train_scene))
    rows = run_ablation(scenes, cfg.train_config(), combos, seeds, encoder, workers=cfg["workers"])
    out = _out_dir(cfg)
    write_ablation_csv(rows, out / "ablation.csv")
    summary = summarize_ablation(rows)
    with open(out / "ablation_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["combination", "seeds", "mean_median_pos_m", "mean_median_ort_deg"])
        for c in combos:
            p, o = summary[c]
            w.writerow([c, " ".join(map(str, seeds)), f"{p:.6f}", f"{o:.4f}"])
            print(f"{c:8s} {p:.4f} m  {o:.2f} deg")
    _manifest(out, "ablate", cfg, seeds=seeds)
    return EXIT_OK


class _SynthScenes:
    """Picklable seed -> (train, test) factory for the ablation workers."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg

    def __call__(self, seed: int):
        return generate_synth_splits(self.cfg.synth_config(seed))


def cmd_pair_stats(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    rows = []
    for scene in load_splits(cfg):
        nxt, _ = pair_similarity_stats(scene, make_pairs(scene, "next"))
        rnd, _ = pair_similarity_stats(scene, make_pairs(scene, "random", cfg["seed"]))
        rows.append([scene.name, scene.split, len(scene), cfg["seed"], f"{nxt:.6f}", f"{rnd:.6f}"])
        print(f"{scene.name} {scene.split}: next {nxt:.4f}  random {rnd:.4f}")
    with open(out / "pair_stats.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene", "split", "frames", "seed", "mean_next", "mean_random"])
        w.writerows(rows)
    _manifest(out, "pair-stats", cfg)
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    model = SiameseNet(cfg.encoder_config(cfg.model.get("input_dim", 32)), seed=cfg["seed"])
    worst = run_gradcheck_suite(cfg["gradcheck_points"], seed=cfg["seed"], model=model)
    tol = 1e-5
    with open(out / "gradcheck.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["loss", "points", "max_rel_error", "tolerance", "passed", "seed"])
        for name in LOSS_CHECKS:
            ok = worst[name] <= tol
            w.writerow([name, cfg["gradcheck_points"], f"{worst[name]:.3e}", tol, ok, cfg["seed"]])
            print(f"{'PASS' if ok else 'FAIL'} {name:22s} {worst[name]:.3e}")
    _manifest(out, "gradcheck", cfg)
    return EXIT_OK if all(v <= tol for v in worst.values()) else EXIT_CHECK_FAILED


def cmd_synth(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    synth = cfg.synth_config()
    for scene in generate_synth_splits(synth):
        write_scene_jsonl(scene, out / f"{synth.name}-{scene.split}.jsonl")
        print(f"wrote {len(scene)} {scene.split} frames ({len(scene.aliased_pairs)} aliased)")
    _manifest(out, "synth", cfg, synth=dataclasses.asdict(synth))
    return EXIT_OK


COMMANDS = {
    "train": (cmd_train, "train a twin network and write checkpoint.json and train_report.json"),
    "evaluate": (cmd_evaluate, "median errors of a checkpoint (or a predictions file) on the test split"),
    "ablate": (cmd_ablate, "train and evaluate every loss combination for several seeds"),
    "pair-stats": (cmd_pair_stats, "mean descriptor distance of next vs random reference pairs"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every loss on a fresh model"),
    "synth": (cmd_synth, "write the train and test splits of a synthetic scene as JSON lines"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="siamreloc",
        description="Twin-network camera pose regression: training, evaluation and loss ablations.",
        epilog="Exit codes: 0 ok, 1 config error, 2 data error, 3 diverged, 4 gradient check failed. "
        "Log level from SIAMRELOC_LOG.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", metavar="PATH", help="flat key = value config file")
        p.add_argument("--seed", type=int, metavar="N", help="root seed (overrides the config)")
        p.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides",
                       help="override one config key; repeatable")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = os.environ.get("SIAMRELOC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_run_config(args.config, args.overrides, args.seed, args.out)
        return COMMANDS[args.command][0](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergedLoss as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (SiamRelocError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
