"""Finite-difference gradient checks for every loss.

Each check draws a random, non-degenerate evaluation point: hinge arguments
and hemisphere signs are kept at least ``KINK_GAP`` away from their switching
points so that central differences never straddle a kink.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diff as D
from . import losses as L
from .diff import Tensor
from .pose import canonicalize_hemisphere, quat_conjugate, quat_multiply, quat_normalize

KINK_GAP = 1e-3
N_PAIRS = 3


def _unit_quats(rng, n):
    return canonicalize_hemisphere(quat_normalize(rng.normal(size=(n, 4))))


def _leaf(a, name):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True, name=name)


@dataclass
class _Point:
    leaves: list
    fn: object


def _pose_truth(rng, n):
    x, x_ref = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
    q, q_ref = _unit_quats(rng, n), _unit_quats(rng, n)
    q_rel = canonicalize_hemisphere(quat_normalize(quat_multiply(quat_conjugate(q_ref), q)))
    return x, x_ref, q, q_ref, x - x_ref, q_rel


def _predictions(rng, n, model=None):
    if model is None:
        return rng.normal(size=(n, 3)), rng.normal(size=(n, 4)), rng.normal(size=(n, 3)), rng.normal(size=(n, 4))
    desc = rng.normal(size=(2 * n, model.config.input_dim))
    x, q = model.gpru(model.encode(desc))
    return x.data[:n], q.data[:n], x.data[n:], q.data[n:]


def _features(rng, n, model=None):
    if model is None:
        return rng.normal(size=(n, 8)), rng.normal(size=(n, 8))
    f = model.encode(rng.normal(size=(2 * n, model.config.input_dim))).data
    return f[:n], f[n:]


def point_global(rng, model=None):
    x, _, q, _, _, _ = _pose_truth(rng, N_PAIRS)
    xh, qh, _, _ = _predictions(rng, N_PAIRS, model)
    xh, qh = _leaf(xh, "x_hat"), _leaf(qh, "q_hat")
    return _Point([xh, qh], lambda: D.add(*L.global_loss(xh, qh, x, q)))


def point_weighted(rng, model=None):
    lx, lq = _leaf(rng.uniform(0.1, 2.0), "L_x"), _leaf(rng.uniform(0.1, 2.0), "L_q")
    w = L.LossWeights(rng.normal(), rng.normal() - 3.0)
    return _Point([lx, lq, w.s_x, w.s_q], lambda: L.weighted_global(lx, lq, w))


def point_weighted_beta(rng, model=None):
    lx, lq = _leaf(rng.uniform(0.1, 2.0), "L_x"), _leaf(rng.uniform(0.1, 2.0), "L_q")
    w = L.LossWeights(beta=float(rng.uniform(1, 500)))
    return _Point([lx, lq], lambda: L.weighted_global(lx, lq, w, mode="fixed_beta"))


def point_rel_consistency(rng, model=None):
    _, _, _, _, x_rel, q_rel = _pose_truth(rng, N_PAIRS)
    while True:
        xh, qh, xr, qr = _predictions(rng, N_PAIRS, model)
        w = L.hamilton(L.conjugate(L.normalize_rows(Tensor(qr))), L.normalize_rows(Tensor(qh))).data[:, 0]
        if np.all(np.abs(w) > KINK_GAP):
            break
        model = None
    leaves = [_leaf(xh, "x_hat"), _leaf(qh, "q_hat"), _leaf(xr, "x_hat_ref"), _leaf(qr, "q_hat_ref")]
    return _Point(leaves, lambda: D.add(*L.rel_consistency_loss(*leaves, x_rel, q_rel)))


def point_rel_regression(rng, model=None):
    _, _, _, _, x_rel, q_rel = _pose_truth(rng, N_PAIRS)
    if model is not None and model.has_rpru:
        f, f_ref = _features(rng, N_PAIRS, model)
        xt, qt = (t.data for t in model.rpru(f, f_ref))
    else:
        xt, qt = rng.normal(size=(N_PAIRS, 3)), rng.normal(size=(N_PAIRS, 4))
    xt, qt = _leaf(xt, "x_rel_pred"), _leaf(qt, "q_rel_pred")
    return _Point([xt, qt], lambda: D.add(*L.rel_regression_loss(xt, qt, x_rel, q_rel)))


def point_metric_distance(rng, model=None):
    alpha = L.DEFAULT_ALPHA
    while True:
        x, x_ref, q, q_ref, _, _ = _pose_truth(rng, N_PAIRS)
        x_ref = x + 0.1 * (x_ref - x)
        q_ref = canonicalize_hemisphere(quat_normalize(q + 0.05 * q_ref))
        f, f_ref = _features(rng, N_PAIRS, model)
        margin = np.linalg.norm(x - x_ref, axis=1) + alpha * np.linalg.norm(q - q_ref, axis=1)
        # scale feature gaps so that roughly half the hinges are active
        gap = f_ref - f
        gap *= (margin * rng.uniform(0.3, 1.7, N_PAIRS) / np.linalg.norm(gap, axis=1))[:, None]
        f_ref = f + gap
        slack = margin - np.linalg.norm(gap, axis=1)
        if np.all(np.abs(slack) > KINK_GAP) and np.any(slack > 0):
            break
    f, f_ref = _leaf(f, "f"), _leaf(f_ref, "f_ref")
    return _Point([f, f_ref], lambda: L.metric_distance_loss(f, f_ref, x, x_ref, q, q_ref, alpha))


def point_siamese(rng, model=None):
    m = L.DEFAULT_MARGIN
    while True:
        f, _ = _features(rng, N_PAIRS, model)
        gap = rng.normal(size=f.shape)
        gap *= (m * rng.uniform(0.7, 2.0, N_PAIRS) / np.linalg.norm(gap, axis=1))[:, None]
        d = np.linalg.norm(gap, axis=1)
        # the hinge kink sits at d = m, and gaps far below m make the norm too
        # curved for h = 1e-6 central differences
        if np.all(np.abs(m - d) > 0.25 * m) and np.any(d < m):
            break
    f, f_ref = _leaf(f, "f"), _leaf(f + gap, "f_ref")
    return _Point([f, f_ref], lambda: L.siamese_loss(f, f_ref, m))


def point_triplet(rng, model=None):
    m = L.DEFAULT_MARGIN
    while True:
        fa, fp = _features(rng, N_PAIRS, model)
        fn = fa + rng.normal(size=fa.shape) * np.linalg.norm(fp - fa, axis=1, keepdims=True) / np.sqrt(fa.shape[1])
        arg = np.sum((fa - fp) ** 2, 1) - np.sum((fa - fn) ** 2, 1) + m
        if np.all(np.abs(arg) > KINK_GAP) and np.any(arg > 0):
            break
    leaves = [_leaf(fa, "f_a"), _leaf(fp, "f_p"), _leaf(fn, "f_n")]
    return _Point(leaves, lambda: L.triplet_loss(*leaves, m))


def point_comprehensive(rng, model=None):
    x, x_ref, q, q_ref, x_rel, q_rel = _pose_truth(rng, N_PAIRS)
    while True:
        xh, qh, xr, qr = _predictions(rng, N_PAIRS, model)
        w = L.hamilton(L.conjugate(L.normalize_rows(Tensor(qr))), L.normalize_rows(Tensor(qh))).data[:, 0]
        f, f_ref = rng.normal(size=(N_PAIRS, 8)), rng.normal(size=(N_PAIRS, 8))
        qn, qrn = canonicalize_hemisphere(q), canonicalize_hemisphere(q_ref)
        margin = np.linalg.norm(x - x_ref, axis=1) + L.DEFAULT_ALPHA * np.linalg.norm(qn - qrn, axis=1)
        slack = margin - np.linalg.norm(f - f_ref, axis=1)
        if np.all(np.abs(w) > KINK_GAP) and np.all(np.abs(slack) > KINK_GAP):
            break
    leaves = {k: _leaf(v, k) for k, v in dict(
        x_hat=xh, q_hat=qh, x_hat_ref=xr, q_hat_ref=qr, f=f, f_ref=f_ref,
        x_rel_pred=rng.normal(size=(N_PAIRS, 3)), q_rel_pred=rng.normal(size=(N_PAIRS, 4)),
    ).items()}
    weights = L.LossWeights(rng.normal(), rng.normal() - 3.0)
    batch = L.PairBatch(x=x, q=q, x_ref=x_ref, q_ref=q_ref, x_rel=x_rel, q_rel=q_rel, **leaves)
    return _Point(list(leaves.values()) + weights.parameters(),
                  lambda: L.comprehensive_loss(batch, weights, "full"))


LOSS_CHECKS = {
    "global": point_global,
    "weighted_learnable": point_weighted,
    "weighted_fixed_beta": point_weighted_beta,
    "rel_consistency": point_rel_consistency,
    "rel_regression": point_rel_regression,
    "metric_distance": point_metric_distance,
    "siamese": point_siamese,
    "triplet": point_triplet,
    "comprehensive_full": point_comprehensive,
}


def run_gradcheck_suite(n_points: int = 100, seed: int = 0, step: float = 1e-6, tolerance: float = 1e-5,
                        model=None, names=None) -> dict[str, float]:
    """Worst relative gradient error per loss over ``n_points`` random points.

    When ``model`` is given, predictions and features are taken from its
    eval-mode outputs on random descriptors instead of plain noise.
    """
    rng = np.random.default_rng(seed)
    worst = {}
    for name in names or LOSS_CHECKS:
        err = 0.0
        for _ in range(n_points):
            pt = LOSS_CHECKS[name](rng, model)
            err = max(err, D.gradcheck(pt.fn, pt.leaves, step, tolerance).max_rel_error)
        worst[name] = err
    return worst
