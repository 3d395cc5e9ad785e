"""Training loop, Adam optimizer and the loss-ablation runner."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diff as D
from .dataset import Scene, TrainingPairSpec, make_pairs, triplet_negatives
from .errors import DivergedLoss, NonFiniteValue
from .evaluation import evaluate
from .losses import COMBINATIONS, DEFAULT_ALPHA, DEFAULT_MARGIN, LossWeights, PairBatch, combination_terms, comprehensive_loss
from .network import EncoderConfig, SiameseNet

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    loss_combination: str = "full"
    learning_rate: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 1e-5
    batch_size: int = 32
    max_epochs: int = 200
    convergence_window: int = 10
    convergence_threshold: float = 1e-4
    rng_seed: int = 0
    pairing_strategy: str = "next"
    random_within_sequence: bool = False
    global_on: str = "both"
    weighting: str = "learnable"
    beta: float | None = None
    alpha: float = DEFAULT_ALPHA
    margin: float = DEFAULT_MARGIN
    s_x_init: float = 0.0
    s_q_init: float = -3.0

    def __post_init__(self):
        combination_terms(self.loss_combination)
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")
        if self.pairing_strategy not in ("next", "random"):
            raise ValueError("pairing_strategy must be 'next' or 'random'")


class Adam:
    """Adam with decoupled weight decay; parameters in ``no_decay`` skip the decay."""

    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, no_decay=()):
        self.params = list(params)
        self.lr, self.eps, self.weight_decay = lr, eps, weight_decay
        self.b1, self.b2 = betas
        self.no_decay = {id(p) for p in no_decay}
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = np.zeros(p.shape) if p.grad is None else p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            if self.weight_decay and id(p) not in self.no_decay:
                p.data = p.data * (1.0 - self.lr * self.weight_decay)
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainReport:
    loss_curve: list[float]
    s_x: float
    s_q: float
    seed: int
    epochs_run: int
    stop_reason: str
    config: dict
    final_params: dict = field(repr=False, compare=False, default_factory=dict)
    param_digest: str = ""
    wall_time: float = field(default=0.0, compare=False)

    def to_json(self) -> str:
        # wall time is left out so that reruns produce identical files
        doc = {k: v for k, v in asdict(self).items() if k not in ("final_params", "wall_time")}
        return json.dumps(doc, indent=1, sort_keys=True)


def _digest(model: SiameseNet) -> str:
    h = hashlib.sha256()
    for k, v in model.params.items():
        h.update(k.encode())
        h.update(v.data.tobytes())
    return h.hexdigest()


def build_batch(model: SiameseNet, scene: Scene, pairs: Sequence[TrainingPairSpec], terms: set[str],
                rng: np.random.Generator | None, negatives: Sequence[str] | None = None) -> PairBatch:
    """Run both twins (and the RPRU if needed) on a list of pairs."""
    cur = [scene.index_of(p.current_frame_id) for p in pairs]
    ref = [scene.index_of(p.reference_frame_id) for p in pairs]
    rows = cur + ref
    if negatives is not None:
        rows += [scene.index_of(n) for n in negatives]
    desc = np.array([scene.frames[i].descriptor for i in rows])
    n = len(pairs)
    feats = model.encode(desc, rng)
    x_hat, q_hat = model.gpru(feats[: 2 * n], rng, mask_groups=2)
    f, f_ref = feats[:n], feats[n : 2 * n]
    x_rel_pred = q_rel_pred = None
    if "R" in terms:
        x_rel_pred, q_rel_pred = model.rpru(f, f_ref, rng)
    pos = np.array([scene.frames[i].pose.position for i in rows[: 2 * n]])
    quat = np.array([scene.frames[i].pose.orientation for i in rows[: 2 * n]])
    return PairBatch(
        x_hat=x_hat[:n], q_hat=q_hat[:n], x_hat_ref=x_hat[n:], q_hat_ref=q_hat[n:],
        f=f, f_ref=f_ref,
        x=pos[:n], q=quat[:n], x_ref=pos[n:], q_ref=quat[n:],
        x_rel=np.array([p.gt_rel.x_rel for p in pairs]),
        q_rel=np.array([p.gt_rel.q_rel for p in pairs]),
        x_rel_pred=x_rel_pred, q_rel_pred=q_rel_pred,
        f_neg=feats[2 * n :] if negatives is not None else None,
    )


def _converged(curve: list[float], window: int, threshold: float) -> bool:
    if window < 1 or len(curve) < 2 * window:
        return False
    prev = float(np.mean(curve[-2 * window : -window]))
    cur = float(np.mean(curve[-window:]))
    return (prev - cur) / max(abs(prev), 1e-12) < threshold


def train(scene: Scene, config: TrainConfig, encoder: EncoderConfig | None = None,
          model: SiameseNet | None = None, checkpoint: str | Path | None = None):
    """Train a twin network on ``scene``; returns ``(model, weights, report)``.

    Pairs are rebuilt from the pairing strategy once, then reshuffled every
    epoch. Training stops at ``max_epochs`` or when the mean loss of the last
    ``convergence_window`` epochs improves on the window before it by less
    than ``convergence_threshold`` (relative).
    """
    t0 = time.perf_counter()
    terms = combination_terms(config.loss_combination)
    encoder = encoder or EncoderConfig(input_dim=len(scene.frames[0].descriptor))
    if model is None:
        encoder.use_rpru = encoder.use_rpru or "R" in terms
        model = SiameseNet(encoder, seed=config.rng_seed)
    weights = LossWeights(config.s_x_init, config.s_q_init, beta=config.beta, alpha=config.alpha)
    pairs = make_pairs(scene, config.pairing_strategy, config.rng_seed, config.random_within_sequence)
    negatives = triplet_negatives(scene, pairs) if "T" in terms else None

    params = model.parameters() + weights.parameters()
    opt = Adam(params, config.learning_rate, (config.adam_beta1, config.adam_beta2), config.adam_eps,
               config.weight_decay, no_decay=weights.parameters())
    rng = np.random.default_rng([config.rng_seed, 7])
    curve: list[float] = []
    stop = "max_epochs"
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(pairs))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            batch_pairs = [pairs[i] for i in idx]
            batch_neg = [negatives[i] for i in idx] if negatives is not None else None
            try:
                batch = build_batch(model, scene, batch_pairs, terms, rng, batch_neg)
                loss = comprehensive_loss(batch, weights, config.loss_combination, config.weighting,
                                          config.global_on, config.margin)
            except NonFiniteValue as exc:
                raise DivergedLoss(f"epoch {epoch}: {exc}") from exc
            if not np.isfinite(loss.item()):
                raise DivergedLoss(f"epoch {epoch}: loss became {loss.item()}")
            opt.zero_grad()
            D.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
        curve.append(total / len(pairs))
        log.debug("epoch %d loss %.6f s_x %.3f s_q %.3f", epoch, curve[-1], weights.s_x.item(), weights.s_q.item())
        if _converged(curve, config.convergence_window, config.convergence_threshold):
            stop = "converged"
            break

    report = TrainReport(
        loss_curve=curve,
        s_x=weights.s_x.item(),
        s_q=weights.s_q.item(),
        seed=config.rng_seed,
        epochs_run=len(curve),
        stop_reason=stop,
        config=asdict(config),
        final_params=model.state_dict(),
        param_digest=_digest(model),
        wall_time=time.perf_counter() - t0,
    )
    if checkpoint is not None:
        model.save(checkpoint, extra={"seed": config.rng_seed, "s_x": report.s_x, "s_q": report.s_q})
    log.info("trained %s (seed %d): %d epochs, final loss %.5f, %.1fs", config.loss_combination,
             config.rng_seed, report.epochs_run, curve[-1] if curve else float("nan"), report.wall_time)
    return model, weights, report


# ---------------------------------------------------------------- ablation


@dataclass(frozen=True)
class AblationRow:
    scene: str
    combination: str
    seed: int
    median_pos_m: float
    median_ort_deg: float
    pairing: str = "next"


ABLATION_COLUMNS = ("scene", "combination", "seed", "median_pos_m", "median_ort_deg")


def _ablation_job(args):
    scenes, base, combination, seed, encoder = args
    train_scene, test_scene = scenes(seed) if callable(scenes) else scenes
    cfg = TrainConfig(**{**asdict(base), "loss_combination": combination, "rng_seed": seed})
    enc = EncoderConfig(**asdict(encoder)) if encoder is not None else None
    model, _, _ = train(train_scene, cfg, enc)
    res = evaluate(model, test_scene)
    return AblationRow(test_scene.name, combination, seed, res.median_position_error,
                       res.median_orientation_error, cfg.pairing_strategy)


def run_ablation(scenes: tuple[Scene, Scene] | Callable[[int], tuple[Scene, Scene]], base_config: TrainConfig,
                 combinations: Sequence[str], seeds: Sequence[int] = (0,), encoder: EncoderConfig | None = None,
                 workers: int = 1) -> list[AblationRow]:
    """Train and evaluate once per (combination, seed).

    ``scenes`` is a ``(train, test)`` pair or a function of the seed returning
    one, so each seed may draw its own scene. Rows come back sorted by
    (combination order, seed) regardless of completion order.
    """
    for c in combinations:
        if c not in COMBINATIONS:
            raise ValueError(f"unknown loss combination {c!r}")
    jobs = [(scenes, base_config, c, s, encoder) for c in combinations for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(_ablation_job, jobs))
    else:
        rows = [_ablation_job(j) for j in jobs]
    order = {c: i for i, c in enumerate(combinations)}
    return sorted(rows, key=lambda r: (order[r.combination], r.seed))


def summarize_ablation(rows: Sequence[AblationRow]) -> dict[str, tuple[float, float]]:
    """Mean (over seeds) of the median position/orientation errors per combination."""
    out: dict[str, list] = {}
    for r in rows:
        out.setdefault(r.combination, []).append((r.median_pos_m, r.median_ort_deg))
    return {c: tuple(np.mean(v, axis=0)) for c, v in out.items()}


def write_ablation_csv(rows: Sequence[AblationRow], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_COLUMNS)
        for r in rows:
            w.writerow([r.scene, r.combination, r.seed, f"{r.median_pos_m:.6f}", f"{r.median_ort_deg:.4f}"])
