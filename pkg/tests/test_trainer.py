import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tempeq.losses import TcWeights
from tempeq.models import ModelConfig
from tempeq.synthdata import AugmentConfig, GeneratorConfig, generate_cohort
from tempeq.trainer import (
    LOG_COLUMNS,
    CheckpointError,
    CheckpointIntegrityError,
    OptimizerState,
    TrainConfig,
    TrainingLog,
    adamw_step,
    checkpoint_roundtrip,
    cosine_warmup_lr,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)

TINY_MODEL = ModelConfig(obs_dim=16, rep_dim=8, proj_dim=16, encoder_hidden=[16])


@pytest.fixture(scope="module")
def cohort():
    return generate_cohort(GeneratorConfig(n_patients=40, obs_dim=16, seed=2))


def tiny_cfg(**kw) -> TrainConfig:
    base = dict(epochs=20, batch_size=16, warmup_epochs=2, base_lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def run(cohort, **kw):
    return pretrain(cohort, tiny_cfg(**kw), model=TINY_MODEL)


# optimizer -------------------------------------------------------------------


def test_adamw_first_step_by_hand():
    p = [np.array([1.0])]
    state = OptimizerState.zeros(p)
    adamw_step(p, [np.array([0.5])], state, lr=0.1, wd=0.01)
    # bias-corrected first step moves by lr * sign(g); decay adds lr * wd * p
    mhat, vhat = 0.5, 0.25
    expected = 1.0 - 0.1 * (mhat / (math.sqrt(vhat) + 1e-8) + 0.01 * 1.0)
    assert p[0][0] == pytest.approx(expected, abs=1e-15)
    assert state.step == 1


def test_adamw_decay_mask_and_zero_grad():
    p = [np.array([2.0]), np.array([2.0])]
    state = OptimizerState.zeros(p)
    adamw_step(p, [np.zeros(1), np.zeros(1)], state, lr=0.1, wd=0.5, decay_mask=[True, False])
    assert p[0][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)
    assert p[1][0] == 2.0


def test_adamw_shape_error():
    p = [np.zeros(2)]
    with pytest.raises(ValueError):
        adamw_step(p, [np.zeros(3)], OptimizerState.zeros(p), 0.1, 0.0)


@settings(max_examples=40, deadline=None)
@given(g=st.floats(1e-3, 1e3), lr=st.floats(1e-5, 1e-1))
def test_adamw_first_step_is_scale_free(g, lr):
    p = [np.array([0.0])]
    adamw_step(p, [np.array([g])], OptimizerState.zeros(p), lr, 0.0)
    assert p[0][0] == pytest.approx(-lr * g / (g + 1e-8), rel=1e-12)


# schedule ------------------------------------------------------------------


def test_schedule_shape():
    total, warm, base = 100, 10, 5e-4
    lrs = [cosine_warmup_lr(s, total, warm, base) for s in range(total)]
    assert lrs[0] == 0.0
    assert lrs[5] == pytest.approx(base / 2)
    assert lrs[warm] == pytest.approx(base)
    assert all(a >= b for a, b in zip(lrs[warm:], lrs[warm + 1 :]))
    assert 0 <= lrs[-1] < base * 1e-2
    assert max(lrs) == pytest.approx(base)


def test_schedule_bounds():
    with pytest.raises(ValueError):
        cosine_warmup_lr(10, 10, 2, 1e-3)
    with pytest.raises(ValueError):
        cosine_warmup_lr(0, 10, 10, 1e-3)


# training ------------------------------------------------------------------


def test_log_columns_and_first_step(cohort):
    _, log = run(cohort, epochs=3)
    assert tuple(log.rows[0]) == LOG_COLUMNS
    first = log.rows[0]
    assert first["step"] == 0
    # zero-initialized predictor: no displacement at the start
    assert abs(first["regularization"] - math.log(2.0)) < 1e-12
    assert first["mean_dm_norm"] == 0.0


def test_loss_decreases(cohort):
    _, log = run(cohort, epochs=40)
    tot = log.column("total")
    assert tot[-5:].mean() < tot[:5].mean()


def test_determinism(cohort):
    a_ck, a_log = run(cohort, epochs=6)
    b_ck, b_log = run(cohort, epochs=6)
    assert a_log.to_csv() == b_log.to_csv()
    for pa, pb in zip(a_ck.params.parts().values(), b_ck.params.parts().values()):
        assert pa.equal(pb)


def test_seed_changes_run(cohort):
    _, a = run(cohort, epochs=4, seed=0)
    _, b = run(cohort, epochs=4, seed=1)
    assert a.to_csv() != b.to_csv()


def test_resume_is_bit_exact(tmp_path, cohort):
    full_ck, full_log = run(cohort, epochs=10)
    cfg = tiny_cfg(epochs=10)
    half_ck, half_log = pretrain(cohort, cfg, model=TINY_MODEL, stop_step=half_steps(cohort, cfg))
    restored = checkpoint_roundtrip(half_ck, tmp_path / "ck")
    rest_ck, rest_log = pretrain(cohort, cfg, model=TINY_MODEL, resume=restored)
    assert TrainingLog(half_log.rows + rest_log.rows).to_csv() == full_log.to_csv()
    save_checkpoint(full_ck, tmp_path / "full")
    save_checkpoint(rest_ck, tmp_path / "resumed")
    assert (tmp_path / "full" / "tensors.bin").read_bytes() == (tmp_path / "resumed" / "tensors.bin").read_bytes()


def half_steps(cohort, cfg):
    from tempeq.trainer import steps_per_epoch

    return cfg.epochs * steps_per_epoch(cohort, cfg.batch_size) // 2


@pytest.mark.parametrize(
    "arm, equivalent",
    [
        ("vicreg_only", TcWeights(beta=0.0, upsilon=0.5)),
        ("tc_no_reg", TcWeights(beta=1.0, upsilon=0.0)),
    ],
)
def test_arm_equivalence(cohort, arm, equivalent):
    _, log_arm = run(cohort, epochs=50, batch_size=32, arm=arm)
    _, log_tc = run(cohort, epochs=50, batch_size=32, arm="tc", tc=equivalent)
    assert len(log_arm.rows) == 50
    for ra, rb in zip(log_arm.rows, log_tc.rows):
        for col in LOG_COLUMNS:
            assert abs(ra[col] - rb[col]) <= 1e-12


def test_vicreg_only_leaves_predictor_untouched_by_loss(cohort):
    ck, log = run(cohort, epochs=5, arm="vicreg_only", weight_decay=0.0)
    assert not ck.params.predictor.layers[-1].weight.any()
    assert np.all(log.column("mean_dm_norm") == 0.0)


def test_direct_arm_has_no_regularizer(cohort):
    _, log = run(cohort, epochs=3, arm="tc_no_dm")
    assert np.all(log.column("regularization") == 0.0)
    assert tiny_cfg(arm="tc_no_dm").effective_weights().upsilon == 0.0


@pytest.mark.parametrize(
    "kw",
    [{"epochs": 0}, {"base_lr": 0.0}, {"arm": "simclr"}, {"weight_decay": -1.0}],
)
def test_config_violations(cohort, kw):
    with pytest.raises(ValueError):
        run(cohort, **kw)


def test_obs_dim_mismatch(cohort):
    with pytest.raises(ValueError, match="obs_dim"):
        pretrain(cohort, tiny_cfg(epochs=1), model=dataclasses.replace(TINY_MODEL, obs_dim=5))


# checkpoints ------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, cohort):
    ck, _ = run(cohort, epochs=2)
    back = checkpoint_roundtrip(ck, tmp_path)
    assert back.step == ck.step and back.config == ck.config and back.model == ck.model
    for pa, pb in zip(ck.params.parts().values(), back.params.parts().values()):
        assert pa.equal(pb)
    for a, b in zip(ck.optimizer.m + ck.optimizer.v, back.optimizer.m + back.optimizer.v):
        assert a.tobytes() == b.tobytes()
    manifest = json.loads((tmp_path / "checkpoint.json").read_text())
    assert manifest["arm"] == "tc" and len(manifest["config_hash"]) == 64


def test_checkpoint_bytes_stable(tmp_path, cohort):
    ck, _ = run(cohort, epochs=2)
    save_checkpoint(ck, tmp_path / "a")
    save_checkpoint(load_checkpoint(tmp_path / "a"), tmp_path / "b")
    for name in ("checkpoint.json", "tensors.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_checkpoint_corruption(tmp_path, cohort):
    ck, _ = run(cohort, epochs=2)
    save_checkpoint(ck, tmp_path)
    blob = bytearray((tmp_path / "tensors.bin").read_bytes())
    blob[100] ^= 0xFF
    (tmp_path / "tensors.bin").write_bytes(bytes(blob))
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(tmp_path)
    (tmp_path / "tensors.bin").write_bytes(bytes(blob[:-8]))
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(tmp_path)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_augment_config_is_stored(tmp_path, cohort):
    aug = AugmentConfig(noise_std=0.05, mask_fraction=0.2, scale_range=(0.9, 1.1))
    ck, _ = pretrain(cohort, tiny_cfg(epochs=1), model=TINY_MODEL, augment=aug)
    assert checkpoint_roundtrip(ck, tmp_path).augment == aug
