import csv
import json

import numpy as np
import pytest

from siamreloc import diff as D
from siamreloc.dataset import Frame, Scene, SynthSceneConfig, generate_synth_splits, make_pairs
from siamreloc.errors import DivergedLoss
from siamreloc.losses import LossWeights, comprehensive_loss
from siamreloc.network import EncoderConfig, SiameseNet
from siamreloc.pose import Pose, quat_normalize
from siamreloc.trainer import (
    ABLATION_COLUMNS,
    Adam,
    AblationRow,
    TrainConfig,
    _converged,
    build_batch,
    run_ablation,
    summarize_ablation,
    train,
    write_ablation_csv,
)

ENC = dict(input_dim=6, hidden_dims=[16], feature_dim=8, head_dim=16)


def toy_scene(n=24, seed=0):
    """Two sequences whose descriptors are a linear function of the pose."""
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(7, 6))
    frames = []
    for i in range(n):
        x = np.array([0.05 * i, np.sin(0.3 * i), 0.0])
        q = quat_normalize([1.0, 0.02 * i, 0.0, 0.01 * i])
        frames.append(Frame(f"f{i:03d}", f"s{i // (n // 2)}", np.concatenate([x, q]) @ A, Pose(x, q)))
    return Scene("toy", frames)


def small_config(**kw):
    return TrainConfig(**{"learning_rate": 1e-3, "max_epochs": 5, "batch_size": 8, **kw})


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(loss_combination="G+X")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(pairing_strategy="nearest")


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2) == (1e-5, 0.9, 0.999)
    assert (cfg.weight_decay, cfg.batch_size, cfg.max_epochs) == (1e-5, 32, 200)
    assert (cfg.convergence_window, cfg.convergence_threshold) == (10, 1e-4)


@pytest.mark.parametrize("combination", ["G", "full", "triplet"])
def test_zero_learning_rate_leaves_parameters(combination):
    scene = toy_scene()
    before = SiameseNet(EncoderConfig(**ENC), seed=3).state_dict()
    model, weights, _ = train(scene, small_config(learning_rate=0.0, rng_seed=3, loss_combination=combination),
                              EncoderConfig(**ENC))
    for k, v in before.items():
        np.testing.assert_array_equal(model.params[k].data, v)
    assert weights.s_x.item() == 0.0 and weights.s_q.item() == -3.0


def test_same_seed_gives_identical_report_and_checkpoint(tmp_path):
    scene = toy_scene()
    a = train(scene, small_config(rng_seed=4), EncoderConfig(**ENC), checkpoint=tmp_path / "a.json")[2]
    b = train(scene, small_config(rng_seed=4), EncoderConfig(**ENC), checkpoint=tmp_path / "b.json")[2]
    assert a == b
    assert a.to_json() == b.to_json()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    c = train(scene, small_config(rng_seed=5), EncoderConfig(**ENC))[2]
    assert c.param_digest != a.param_digest


def test_report_contents():
    _, _, report = train(toy_scene(), small_config(rng_seed=1), EncoderConfig(**ENC))
    assert report.epochs_run == len(report.loss_curve) == 5
    assert all(np.isfinite(report.loss_curve))
    assert report.stop_reason == "max_epochs"
    assert report.seed == 1
    assert set(report.final_params) >= {"enc0.W", "gpru.fc1.W"}
    doc = json.loads(report.to_json())
    assert "wall_time" not in doc and "final_params" not in doc
    assert doc["config"]["rng_seed"] == 1


def test_training_reduces_loss_on_a_linear_scene():
    cfg = small_config(loss_combination="G", max_epochs=60, learning_rate=3e-3, convergence_threshold=0.0)
    _, _, report = train(toy_scene(), cfg, EncoderConfig(**{**ENC, "dropout_rate": 0.0}))
    assert report.loss_curve[-1] < 0.5 * report.loss_curve[0]


def test_convergence_rule():
    flat = [1.0] * 20
    assert _converged(flat, 10, 1e-4)
    falling = list(np.linspace(10, 1, 20))
    assert not _converged(falling, 10, 1e-4)
    assert not _converged(flat[:19], 10, 1e-4)  # needs two full windows
    cfg = small_config(max_epochs=100, learning_rate=0.0, convergence_window=3)
    _, _, report = train(toy_scene(), cfg, EncoderConfig(**{**ENC, "dropout_rate": 0.0}))
    assert report.stop_reason == "converged" and report.epochs_run == 6


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    scene = toy_scene()
    bad = Scene("bad", [Frame(f.id, f.sequence_id, f.descriptor * np.inf, f.pose) for f in scene.frames])
    with pytest.raises(DivergedLoss):
        train(bad, small_config(), EncoderConfig(**ENC))


def test_adam_weight_decay_skips_excluded_parameters():
    w = D.Tensor(np.ones(3), requires_grad=True)
    s = D.Tensor(1.0, requires_grad=True)
    opt = Adam([w, s], lr=0.1, weight_decay=0.5, no_decay=[s])
    opt.step()  # no gradients: only the decay acts
    np.testing.assert_allclose(w.data, 0.95)
    assert s.item() == 1.0


def test_adam_first_step_moves_by_lr():
    w = D.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam([w], lr=0.01)
    w.grad = np.array([3.0, -0.5])
    opt.step()
    np.testing.assert_allclose(w.data, [0.99, -1.99], atol=1e-8)


def test_s_parameters_get_gradients_through_a_training_batch():
    scene = toy_scene()
    model = SiameseNet(EncoderConfig(**ENC), seed=0)
    weights = LossWeights()
    batch = build_batch(model, scene, make_pairs(scene, "next")[:6], {"G", "C", "R", "M"}, None)
    D.backward(comprehensive_loss(batch, weights, "full"))
    assert weights.s_x.grad != 0 and weights.s_q.grad != 0


def test_ablation_bookkeeping():
    scene = toy_scene()
    rows = run_ablation((scene, scene), small_config(max_epochs=2), ["G", "full"], [0, 1], EncoderConfig(**ENC))
    assert [(r.combination, r.seed) for r in rows] == [("G", 0), ("G", 1), ("full", 0), ("full", 1)]
    single = run_ablation((scene, scene), small_config(max_epochs=1), ["G"], [0], EncoderConfig(**ENC))
    assert len(single) == 1
    with pytest.raises(ValueError):
        run_ablation((scene, scene), small_config(), ["H"], [0])


def test_ablation_accepts_a_scene_factory():
    cfg = SynthSceneConfig(num_sequences=2, frames_per_sequence=20, num_test_sequences=1, descriptor_dim=6,
                           aliasing_fraction=0.0)
    seen = []

    def factory(seed):
        seen.append(seed)
        return generate_synth_splits(SynthSceneConfig(**{**cfg.__dict__, "rng_seed": seed}))

    rows = run_ablation(factory, small_config(max_epochs=1), ["G"], [3, 4], EncoderConfig(**ENC))
    assert seen == [3, 4] and [r.seed for r in rows] == [3, 4]


def test_summary_and_csv(tmp_path):
    rows = [AblationRow("s", "G", 0, 0.2, 4.0), AblationRow("s", "G", 1, 0.4, 6.0), AblationRow("s", "full", 0, 0.1, 2.0)]
    summary = summarize_ablation(rows)
    assert summary["G"] == pytest.approx((0.3, 5.0))
    assert summary["full"] == pytest.approx((0.1, 2.0))
    write_ablation_csv(rows, tmp_path / "a.csv")
    table = list(csv.reader(open(tmp_path / "a.csv")))
    assert tuple(table[0]) == ABLATION_COLUMNS
    assert len(table) == 4
