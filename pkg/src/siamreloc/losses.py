"""Pose and feature-space losses for the twin network.

All losses take batched tensors (rows are pairs) and return 0-d tensors.
Per-pair Euclidean losses are averaged over the batch; the hinge losses use
the reductions of their published definitions (``1/2N`` for the metric and
siamese losses, a plain sum for the triplet loss).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diff as D
from .diff import Tensor
from .errors import MissingHead, ZeroNormQuaternion
from .pose import NORM_EPS, canonicalize_hemisphere, quat_normalize

DEFAULT_ALPHA = 10.0
DEFAULT_MARGIN = 1e-3
DEFAULT_S_X = 0.0
DEFAULT_S_Q = -3.0

COMBINATIONS = ("G", "G+C", "G+C+R", "G+M", "G+R", "full", "siamese", "triplet")
_TERMS = {
    "G": set(),
    "G+C": {"C"},
    "G+C+R": {"C", "R"},
    "G+M": {"M"},
    "G+R": {"R"},
    "full": {"C", "R", "M"},
    "siamese": {"C", "R", "S"},
    "triplet": {"C", "R", "T"},
}


def combination_terms(name: str) -> set[str]:
    """Loss terms (besides GlobalLoss) switched on by a combination id."""
    try:
        return set(_TERMS[name])
    except KeyError:
        raise ValueError(f"unknown loss combination {name!r}; choose from {COMBINATIONS}") from None


@dataclass
class LossWeights:
    s_x: Tensor = field(default_factory=lambda: Tensor(DEFAULT_S_X, requires_grad=True, name="s_x"))
    s_q: Tensor = field(default_factory=lambda: Tensor(DEFAULT_S_Q, requires_grad=True, name="s_q"))
    beta: float | None = None
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        self.s_x = self.s_x if isinstance(self.s_x, Tensor) else Tensor(self.s_x, requires_grad=True, name="s_x")
        self.s_q = self.s_q if isinstance(self.s_q, Tensor) else Tensor(self.s_q, requires_grad=True, name="s_q")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.beta is not None and self.beta <= 0:
            raise ValueError("beta must be positive")

    def parameters(self) -> list[Tensor]:
        return [self.s_x, self.s_q]


# ---------------------------------------------------------------- helpers


def _rows(t) -> Tensor:
    t = D.as_tensor(t)
    return D.reshape(t, (1, -1)) if t.data.ndim == 1 else t


def _const(a) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    return Tensor(a.reshape(1, -1) if a.ndim == 1 else a)


def normalize_rows(q: Tensor) -> Tensor:
    """Scale each row of ``q`` to unit length."""
    n = D.euclidean_norm(q, axis=1)
    if np.any(n.data <= NORM_EPS):
        raise ZeroNormQuaternion("predicted quaternion has (numerically) zero norm")
    return q / D.expand(D.reshape(n, (-1, 1)), q.shape)


def hamilton(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise Hamilton product of two ``(N, 4)`` tensors."""
    aw, ax, ay, az = (a[:, i : i + 1] for i in range(4))
    bw, bx, by, bz = (b[:, i : i + 1] for i in range(4))
    return D.concat(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=1,
    )


def conjugate(q: Tensor) -> Tensor:
    return q * Tensor(np.tile([1.0, -1.0, -1.0, -1.0], (q.shape[0], 1)))


def _hemisphere(q: Tensor) -> Tensor:
    # the sign is piecewise constant, so it passes gradients through unchanged
    flip = np.sign(np.sum(canonicalize_hemisphere(q.data) * q.data, axis=1, keepdims=True))
    return q * Tensor(np.tile(flip, (1, 4)))


def _mean_dist(a: Tensor, b: Tensor) -> Tensor:
    return D.mean(D.euclidean_norm(a - b, axis=1))


# ---------------------------------------------------------------- pose losses


def global_loss(x_hat, q_hat_raw, x, q) -> tuple[Tensor, Tensor]:
    """Position and orientation GlobalLoss terms, averaged over rows."""
    x_hat, q_hat_raw = _rows(x_hat), _rows(q_hat_raw)
    return _mean_dist(_const(x), x_hat), _mean_dist(_const(q), normalize_rows(q_hat_raw))


def weighted_global(L_x, L_q, weights: LossWeights, mode: str = "learnable") -> Tensor:
    """Combine position and orientation losses.

    ``fixed_beta``: ``L_x + beta * L_q``.
    ``learnable``: ``L_x exp(-s_x) + s_x + L_q exp(-s_q) + s_q``.
    """
    if mode == "fixed_beta":
        if weights.beta is None:
            raise ValueError("fixed_beta mode needs weights.beta")
        return D.add(L_x, D.mul(L_q, weights.beta))
    if mode != "learnable":
        raise ValueError(f"unknown weighting mode {mode!r}")
    sx, sq = weights.s_x, weights.s_q
    return L_x * D.exp(-sx) + sx + L_q * D.exp(-sq) + sq


def predicted_relative(x_hat, q_hat_raw, x_hat_ref, q_hat_ref_raw) -> tuple[Tensor, Tensor]:
    """Relative pose implied by two predicted global poses.

    Both quaternions are normalized before the product, and the result is
    put on the ``w >= 0`` hemisphere like the ground truth it is compared to.
    """
    x_rel = _rows(x_hat) - _rows(x_hat_ref)
    q_rel = hamilton(conjugate(normalize_rows(_rows(q_hat_ref_raw))), normalize_rows(_rows(q_hat_raw)))
    return x_rel, _hemisphere(q_rel)


def rel_consistency_loss(x_hat, q_hat_raw, x_hat_ref, q_hat_ref_raw, x_rel, q_rel) -> tuple[Tensor, Tensor]:
    """RelLoss: predicted-global-pose differences against the true relative pose."""
    px, pq = predicted_relative(x_hat, q_hat_raw, x_hat_ref, q_hat_ref_raw)
    return _mean_dist(px, _const(x_rel)), _mean_dist(pq, _const(q_rel))


def rel_regression_loss(x_rel_pred, q_rel_pred_raw, x_rel, q_rel) -> tuple[Tensor, Tensor]:
    """RelRLoss on the RPRU output; the regressed quaternion is normalized first."""
    return (
        _mean_dist(_const(x_rel), _rows(x_rel_pred)),
        _mean_dist(_const(q_rel), normalize_rows(_rows(q_rel_pred_raw))),
    )


# ---------------------------------------------------------------- feature losses


def metric_distance_loss(f, f_ref, x, x_ref, q, q_ref, alpha: float = DEFAULT_ALPHA) -> Tensor:
    """Adaptive metric-distance hinge.

    The margin ``d_x + alpha * d_q`` comes from ground-truth poses only, so the
    gradient reaches nothing but the features.
    """
    f, f_ref = _rows(f), _rows(f_ref)
    x, x_ref = np.atleast_2d(x), np.atleast_2d(x_ref)
    q = canonicalize_hemisphere(quat_normalize(np.atleast_2d(q)))
    q_ref = canonicalize_hemisphere(quat_normalize(np.atleast_2d(q_ref)))
    margin = np.linalg.norm(x - x_ref, axis=1) + alpha * np.linalg.norm(q - q_ref, axis=1)
    d = D.euclidean_norm(f - f_ref, axis=1)
    slack = D.relu(Tensor(margin) - d)
    return D.sum_(D.square(slack)) * (0.5 / f.shape[0])


def siamese_loss(f, f_ref, margin: float = DEFAULT_MARGIN) -> Tensor:
    """Contrastive loss with every pair labelled dissimilar."""
    if margin <= 0:
        raise ValueError("margin must be positive")
    f, f_ref = _rows(f), _rows(f_ref)
    d = D.euclidean_norm(f - f_ref, axis=1)
    return D.sum_(D.square(D.relu(margin - d))) * (0.5 / f.shape[0])


def triplet_loss(f_a, f_p, f_n, margin: float = DEFAULT_MARGIN) -> Tensor:
    if margin <= 0:
        raise ValueError("margin must be positive")
    f_a, f_p, f_n = _rows(f_a), _rows(f_p), _rows(f_n)
    pos = D.sum_(D.square(f_a - f_p), axis=1)
    neg = D.sum_(D.square(f_a - f_n), axis=1)
    return D.sum_(D.relu(pos - neg + margin))


# ---------------------------------------------------------------- combined


@dataclass
class PairBatch:
    """Network outputs and ground truth for N (current, reference) pairs.

    Ground-truth fields are plain arrays; prediction fields are tensors.
    ``x_rel_pred``/``q_rel_pred`` come from the RPRU and ``f_neg`` holds the
    negatives for the triplet variant; both are optional.
    """

    x_hat: Tensor
    q_hat: Tensor
    x_hat_ref: Tensor
    q_hat_ref: Tensor
    f: Tensor
    f_ref: Tensor
    x: np.ndarray
    q: np.ndarray
    x_ref: np.ndarray
    q_ref: np.ndarray
    x_rel: np.ndarray
    q_rel: np.ndarray
    x_rel_pred: Tensor | None = None
    q_rel_pred: Tensor | None = None
    f_neg: Tensor | None = None

    def __len__(self):
        return self.f.shape[0]


def loss_terms(batch: PairBatch, combination: str, weights: LossWeights,
               global_on: str = "both", margin: float = DEFAULT_MARGIN) -> dict[str, Tensor]:
    """Every active component loss for a combination, keyed by symbol."""
    terms = combination_terms(combination)
    out = {}
    gx, gq = global_loss(batch.x_hat, batch.q_hat, batch.x, batch.q)
    if global_on == "both":
        rx, rq = global_loss(batch.x_hat_ref, batch.q_hat_ref, batch.x_ref, batch.q_ref)
        gx, gq = (gx + rx) * 0.5, (gq + rq) * 0.5
    elif global_on != "current":
        raise ValueError(f"global_on must be 'both' or 'current', got {global_on!r}")
    out["Gx"], out["Gq"] = gx, gq
    if "C" in terms:
        out["Cx"], out["Cq"] = rel_consistency_loss(
            batch.x_hat, batch.q_hat, batch.x_hat_ref, batch.q_hat_ref, batch.x_rel, batch.q_rel
        )
    if "R" in terms:
        if batch.x_rel_pred is None or batch.q_rel_pred is None:
            raise MissingHead(f"combination {combination!r} needs RPRU outputs")
        out["Rx"], out["Rq"] = rel_regression_loss(batch.x_rel_pred, batch.q_rel_pred, batch.x_rel, batch.q_rel)
    if "M" in terms:
        out["MD"] = metric_distance_loss(batch.f, batch.f_ref, batch.x, batch.x_ref, batch.q, batch.q_ref,
                                         weights.alpha)
    if "S" in terms:
        out["MD"] = siamese_loss(batch.f, batch.f_ref, margin)
    if "T" in terms:
        if batch.f_neg is None:
            raise ValueError("triplet combination needs negative features")
        out["MD"] = triplet_loss(batch.f, batch.f_ref, batch.f_neg, margin)
    return out


def comprehensive_loss(batch: PairBatch, weights: LossWeights, combination: str = "full",
                       mode: str = "learnable", global_on: str = "both",
                       margin: float = DEFAULT_MARGIN) -> Tensor:
    """Weighted sum of position terms, orientation terms and the metric term.

    Position terms (Gx, Cx, Rx) and orientation terms (Gq, Cq, Rq) are summed
    separately and then balanced by :func:`weighted_global`; the metric term
    is added unweighted.
    """
    terms = loss_terms(batch, combination, weights, global_on, margin)
    L_x = terms["Gx"]
    L_q = terms["Gq"]
    for k in ("Cx", "Rx"):
        if k in terms:
            L_x = L_x + terms[k]
    for k in ("Cq", "Rq"):
        if k in terms:
            L_q = L_q + terms[k]
    total = weighted_global(L_x, L_q, weights, mode)
    if "MD" in terms:
        total = total + terms["MD"]
    return total
