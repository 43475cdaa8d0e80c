from __future__ import annotations

import numpy as np
import pytest

from scenediff import shape as S
from scenediff.autodiff import Tensor, set_finite_checks
from scenediff.autodiff import tensor as T
from scenediff.config import RunConfig
from scenediff.pose import PoseNormalizer
from scenediff.synthetic import SceneConfig, generate_records
from scenediff.train import (MetricLog, ObjectTable, Prediction, Stepper, TrainingAborted, evaluate, load_model,
                             sample, train, train_joint_pair)

TINY = dict(feat_width=16, pose_width=16, pose_blocks=1, pose_min_width=8, pose_heads=2, pose_head_dim=4,
            cond_tokens=2, shape_width=8, shape_encoder_layers=1, shape_decoder_layers=1, shape_heads=2,
            shape_head_dim=4, latent_dim=8, latent_width=8, latent_encoder_layers=1, latent_decoder_layers=1,
            latent_heads=2, latent_head_dim=4, decoder_hidden=8, epochs=2, joint_epochs=1, decoder_epochs=1,
            latent_epochs=1, batch_scenes=2, steps=4, mesh_res=12, eval_samples=50, align_targets=32,
            decoder_points=32, lr=1e-3, log_every=1)


@pytest.fixture(scope="module")
def records():
    return generate_records(4, 0, SceneConfig(max_objects=3))


@pytest.fixture(scope="module")
def tiny(records, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return train(records, RunConfig(**TINY), out), out


def _table(records, cfg):
    return ObjectTable.from_records(records, PoseNormalizer(), S.ShapeCodeNormalizer(cfg.g), cfg.align_targets,
                                    np.random.default_rng(0))


def test_non_finite_loss_aborts():
    w = Tensor(np.ones(3), requires_grad=True)
    log = MetricLog(None)
    st = Stepper([w], RunConfig(), 10)
    st.update("x", T.sum_(T.mul(w, w)), log)
    set_finite_checks(False)
    try:
        with pytest.raises(TrainingAborted, match="non-finite loss"):
            st.update("x", T.mul(T.sum_(w), Tensor(np.array(np.nan))), log)
    finally:
        set_finite_checks(True)
    assert log.rows[-1]["loss"] == "nan"


def test_stepper_ema_finish():
    w = Tensor(np.zeros(2), requires_grad=True)
    st = Stepper([w], RunConfig(lr=0.1, warmup_steps=0, cosine_decay=False, ema_decay=0.5), 5)
    for _ in range(5):
        st.update("x", T.sum_(T.mul(w, Tensor(np.array([1.0, -1.0])))), MetricLog(None))
    live = w.data.copy()
    st.finish()
    assert np.all(np.abs(w.data) < np.abs(live))


def test_train_writes_run(tiny):
    trained, out = tiny
    for name in ("metrics.csv", "config.json", "run.json", "model.sde"):
        assert (out / name).exists()
    stages = {line.split(",")[0] for line in (out / "metrics.csv").read_text().splitlines()[1:]}
    assert stages == {"decoder", "latent", "diffusion", "joint"}


def test_load_roundtrip(tiny, records):
    trained, out = tiny
    back = load_model(out)
    table = _table(records, trained.cfg)
    a = sample(trained, table, np.random.default_rng(3))
    b = sample(back, table, np.random.default_rng(3))
    assert np.array_equal(a.pose, b.pose) and np.array_equal(a.code, b.code)


def test_load_width_mismatch_names_both(tiny):
    _, out = tiny
    cfg = RunConfig(**{**TINY, "pose_width": 32})
    with pytest.raises(ValueError, match="pose_width: checkpoint 16 vs config 32"):
        load_model(out, cfg)


def test_sample_shapes_and_determinism(tiny, records):
    trained, _ = tiny
    table = _table(records, trained.cfg)
    p = sample(trained, table, np.random.default_rng(1))
    assert p.pose.shape == (table.n, 7) and p.code.shape == (table.n, 16 * 16)
    assert p.latents.shape == (table.n, 16, 8)
    assert np.array_equal(sample(trained, table, np.random.default_rng(1)).pose, p.pose)
    u = sample(trained, table, np.random.default_rng(1), unconditional=True)
    assert np.isfinite(u.pose).all()


def test_evaluate_ground_truth_is_perfect(tiny, records):
    trained, _ = tiny
    table = _table(records, trained.cfg)
    gt = Prediction(table.pose, table.code, np.zeros((table.n, 16, 8)))
    rep = evaluate(trained, table, gt, table.camera, np.random.default_rng(0), shape_metrics=False)
    assert rep["summary"]["iou3d"] == pytest.approx(1.0, abs=1e-9)
    assert rep["summary"]["ap"] == pytest.approx(100.0)
    assert rep["summary"]["align"] < 0.05


def test_regression_and_joint_pair(records):
    cfg = RunConfig(**{**TINY, "decoder_epochs": 0, "regression": True})
    joint, plain = train_joint_pair(records, cfg)
    assert joint.cfg.joint and not plain.cfg.joint
    table = _table(records, cfg)
    a = sample(joint, table, np.random.default_rng(0)).pose
    b = sample(plain, table, np.random.default_rng(0)).pose
    assert a.shape == b.shape and not np.array_equal(a, b)
