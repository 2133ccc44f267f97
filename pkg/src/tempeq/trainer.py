"""Pretraining loop for the time-equivariant objective and its ablation arms."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import Layer, MlpParams, NonFiniteError, add_grads, mlp_apply, mlp_backward
from .losses import (
    LossBreakdown,
    TcWeights,
    VicregWeights,
    dm_regularization,
    dm_regularization_grad,
    equivariance_grad,
    equivariance_loss,
    total_loss,
    vicreg_grad,
    vicreg_loss,
)
from .models import ModelConfig, ModelParams, init_models, predictor_input
from .synthdata import AugmentConfig, Cohort, PairBatch, eligible_patient_count, sample_pair_batch

ARMS = ("tc", "tc_no_dm", "tc_no_reg", "vicreg_only")
DM_ARMS = ("tc", "tc_no_reg")
LOG_COLUMNS = (
    "step", "lr", "s_term", "v_term", "c_term", "contrastive",
    "equivariance", "regularization", "total", "mean_dm_norm",
)
CHECKPOINT_FORMAT = "tempeq-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 128
    base_lr: float = 5e-4
    weight_decay: float = 1e-6
    warmup_epochs: int = 10
    arm: str = "tc"
    vicreg: VicregWeights = field(default_factory=VicregWeights)
    tc: TcWeights = field(default_factory=TcWeights)
    seed: int = 0
    # detach the later-visit representation inside the equivariance loss
    stop_grad_target: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or not self.base_lr > 0:
            raise ValueError("trainer.epochs, batch_size and base_lr must be positive")
        if self.weight_decay < 0 or self.warmup_epochs < 0:
            raise ValueError("trainer.weight_decay and warmup_epochs must be >= 0")
        if self.arm not in ARMS:
            raise ValueError(f"trainer.arm must be one of {ARMS}, got {self.arm!r}")
        self.vicreg.validate()

    def effective_weights(self) -> TcWeights:
        beta, upsilon = self.tc.beta, self.tc.upsilon
        if self.arm == "vicreg_only":
            beta = 0.0
        if self.arm in ("tc_no_reg", "tc_no_dm"):
            upsilon = 0.0
        return TcWeights(beta, upsilon)


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    if "vicreg" in d:
        d["vicreg"] = VicregWeights(**d["vicreg"])
    if "tc" in d:
        d["tc"] = TcWeights(**d["tc"])
    return TrainConfig(**d)


# optimizer + schedule -------------------------------------------------------


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: list[np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0, beta1, beta2, eps)


def adamw_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: OptimizerState,
    lr: float,
    wd: float,
    decay_mask: list[bool] | None = None,
) -> None:
    """In-place AdamW update; decay is decoupled and skipped where ``decay_mask`` is False."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ValueError(f"shape mismatch at parameter {i}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        update = (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + state.eps)
        decay = wd * p if (decay_mask is None or decay_mask[i]) else 0.0
        p -= lr * (update + decay)


def cosine_warmup_lr(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    if not 0 <= warmup_steps < total_steps:
        raise ValueError("warmup_steps must lie in [0, total_steps)")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# one forward/backward pass ---------------------------------------------------


def tc_forward_backward(
    params: ModelParams,
    view_a: np.ndarray,
    view_b: np.ndarray,
    dt_norm: np.ndarray,
    arm: str,
    vicreg: VicregWeights,
    weights: TcWeights,
    need_grads: bool = True,
    stop_grad_target: bool = False,
) -> tuple[LossBreakdown, ModelParams | None, float]:
    """Loss breakdown, parameter gradients and mean displacement norm for one batch.

    ``weights`` are applied as given; arm-specific zeroing is the caller's job
    (see :meth:`TrainConfig.effective_weights`).
    """
    r_a, tr_enc_a = mlp_apply(params.encoder, view_a)
    r_b, tr_enc_b = mlp_apply(params.encoder, view_b)
    z_a, tr_proj_a = mlp_apply(params.projector, r_a)
    z_b, tr_proj_b = mlp_apply(params.projector, r_b)
    vic = vicreg_loss(z_a, z_b, vicreg)

    dm, tr_pred = mlp_apply(params.predictor, predictor_input(r_a, dt_norm))
    with_skip = arm != "tc_no_dm"
    predicted = r_a + dm if with_skip else dm
    equiv = equivariance_loss(r_b, predicted)
    if with_skip:
        reg = dm_regularization(dm)
        dm_norm = float(np.mean(np.linalg.norm(dm, axis=1)))
    else:
        reg = 0.0
        dm_norm = float(np.mean(np.linalg.norm(dm - r_a, axis=1)))
    total = total_loss(vic["contrastive"], equiv, reg, weights)
    breakdown = LossBreakdown(
        vic["s_term"], vic["v_term"], vic["c_term"], vic["contrastive"], equiv, reg, total
    )
    if not math.isfinite(total):
        raise NonFiniteError(f"non-finite loss {breakdown}")
    if not need_grads:
        return breakdown, None, dm_norm

    beta, upsilon = weights.beta, weights.upsilon
    g_za, g_zb = vicreg_grad(z_a, z_b, vicreg)
    g_proj, g_ra = mlp_backward(params.projector, tr_proj_a, g_za)
    g_proj_b, g_rb = mlp_backward(params.projector, tr_proj_b, g_zb)
    add_grads(g_proj, g_proj_b)

    g_target, g_pred_out = equivariance_grad(r_b, predicted)
    if not stop_grad_target:
        g_rb = g_rb + beta * g_target
    g_dm = beta * g_pred_out
    if with_skip:
        g_ra = g_ra + beta * g_pred_out
        g_dm = g_dm + beta * upsilon * dm_regularization_grad(dm)
    g_pred, g_inp = mlp_backward(params.predictor, tr_pred, g_dm)
    g_ra = g_ra + g_inp[:, :-1]

    g_enc, _ = mlp_backward(params.encoder, tr_enc_a, g_ra)
    g_enc_b, _ = mlp_backward(params.encoder, tr_enc_b, g_rb)
    add_grads(g_enc, g_enc_b)
    return breakdown, ModelParams(g_enc, g_proj, g_pred), dm_norm


# bookkeeping ---------------------------------------------------------------


@dataclass
class TrainingLog:
    rows: list[dict] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            w.writerow([r["step"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path: str | Path) -> "TrainingLog":
        with open(path) as fh:
            rows = []
            for rec in csv.DictReader(fh):
                rows.append({k: (int(v) if k == "step" else float(v)) for k, v in rec.items()})
        return cls(rows)


@dataclass
class Checkpoint:
    params: ModelParams
    optimizer: OptimizerState
    config: TrainConfig
    model: ModelConfig
    augment: AugmentConfig
    step: int
    extra: dict = field(default_factory=dict)

    @property
    def arm(self) -> str:
        return self.config.arm


def _flat(params: ModelParams) -> list[np.ndarray]:
    return params.encoder.arrays() + params.projector.arrays() + params.predictor.arrays()


def _decay_mask(params: ModelParams) -> list[bool]:
    # arrays alternate weight, bias
    return [i % 2 == 0 for i in range(len(_flat(params)))]


def steps_per_epoch(cohort: Cohort, batch_size: int) -> int:
    return max(1, eligible_patient_count(cohort) // batch_size)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 7, step])


def pretrain(
    cohort: Cohort,
    cfg: TrainConfig,
    model: ModelConfig | None = None,
    augment: AugmentConfig | None = None,
    resume: Checkpoint | None = None,
    stop_step: int | None = None,
) -> tuple[Checkpoint, TrainingLog]:
    """Run (or continue) pretraining; returns the final checkpoint and this call's log rows.

    ``stop_step`` ends the run early after that many total updates, which
    together with ``resume`` gives bit-exact interrupted training.
    """
    cfg.validate()
    model = model or ModelConfig(obs_dim=cohort.config.obs_dim)
    augment = augment or AugmentConfig()
    augment.validate()
    if model.obs_dim != cohort.x.shape[1]:
        raise ValueError(f"model.obs_dim={model.obs_dim} but cohort has {cohort.x.shape[1]} features")
    if cohort.n_visits == 0:
        raise ValueError("empty dataset")

    per_epoch = steps_per_epoch(cohort, cfg.batch_size)
    total_steps = cfg.epochs * per_epoch
    # short runs (smoke tests) keep at least one step after warmup
    warmup_steps = min(cfg.warmup_epochs * per_epoch, total_steps - 1)
    end = total_steps if stop_step is None else min(stop_step, total_steps)

    if resume is None:
        params = init_models(model, cfg.seed)
        opt = OptimizerState.zeros(_flat(params), cfg.beta1, cfg.beta2, cfg.eps_opt)
        start = 0
    else:
        params, opt, start = resume.params.copy(), _copy_opt(resume.optimizer), resume.step
    weights = cfg.effective_weights()
    flat = _flat(params)
    mask = _decay_mask(params)

    log = TrainingLog()
    for step in range(start, end):
        rng = step_rng(cfg.seed, step)
        batch: PairBatch = sample_pair_batch(cohort, cfg.batch_size, rng, augment)
        lr = cosine_warmup_lr(step, total_steps, warmup_steps, cfg.base_lr)
        try:
            br, grads, dm_norm = tc_forward_backward(
                params, batch.view_a, batch.view_b, batch.dt_norm, cfg.arm, cfg.vicreg, weights,
                stop_grad_target=cfg.stop_grad_target,
            )
        except NonFiniteError as exc:
            raise TrainingError(f"arm {cfg.arm}, step {step}: {exc}") from exc
        adamw_step(flat, _flat(grads), opt, lr, cfg.weight_decay, mask)
        log.rows.append({"step": step, "lr": lr, **asdict(br), "mean_dm_norm": dm_norm})

    ckpt = Checkpoint(params, opt, cfg, model, augment, end)
    return ckpt, log


def _copy_opt(o: OptimizerState) -> OptimizerState:
    return OptimizerState([a.copy() for a in o.m], [a.copy() for a in o.v], o.step, o.beta1, o.beta2, o.eps)


# checkpoint files -------------------------------------------------------------


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: TrainConfig, model: ModelConfig, augment: AugmentConfig) -> str:
    blob = _canonical({"trainer": asdict(cfg), "model": asdict(model), "augment": asdict(augment)})
    return hashlib.sha256(blob.encode()).hexdigest()


def _named_tensors(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = []
    for part, mlp in ckpt.params.parts().items():
        out.extend(mlp.named_arrays(f"{part}."))
    names = [n for n, _ in out]
    out.extend((f"optimizer.m.{n}", a) for n, a in zip(names, ckpt.optimizer.m))
    out.extend((f"optimizer.v.{n}", a) for n, a in zip(names, ckpt.optimizer.v))
    return out


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blobs, entries, offset = [], [], 0
    for name, arr in _named_tensors(ckpt):
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    blob = b"".join(blobs)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arm": ckpt.config.arm,
        "config_hash": config_hash(ckpt.config, ckpt.model, ckpt.augment),
        "config": asdict(ckpt.config),
        "model": asdict(ckpt.model),
        "augment": asdict(ckpt.augment),
        "step": ckpt.step,
        "rng": {"scheme": "per-step", "seed": ckpt.config.seed, "next_step": ckpt.step},
        "optimizer": {
            "step": ckpt.optimizer.step,
            "beta1": ckpt.optimizer.beta1,
            "beta2": ckpt.optimizer.beta2,
            "eps": ckpt.optimizer.eps,
        },
        "activations": {
            part: [l.activation for l in mlp.layers] for part, mlp in ckpt.params.parts().items()
        },
        "tensors": entries,
        "blob_nbytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "extra": ckpt.extra,
    }
    (path / "tensors.bin").write_bytes(blob)
    (path / "checkpoint.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    mpath, bpath = path / "checkpoint.json", path / "tensors.bin"
    if not mpath.is_file() or not bpath.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint.json is not valid JSON: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not a tempeq checkpoint")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('version')!r}")
    blob = bpath.read_bytes()
    if len(blob) != manifest["blob_nbytes"]:
        raise CheckpointIntegrityError(
            f"tensors.bin has {len(blob)} bytes, manifest declares {manifest['blob_nbytes']}"
        )
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointIntegrityError("tensors.bin checksum mismatch")

    tensors = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(np.float64)

    parts = {}
    for part, acts in manifest["activations"].items():
        parts[part] = MlpParams(
            [
                Layer(tensors[f"{part}.layers.{i}.weight"], tensors[f"{part}.layers.{i}.bias"], act)
                for i, act in enumerate(acts)
            ]
        )
    params = ModelParams(parts["encoder"], parts["projector"], parts["predictor"])
    names = [n for part, mlp in params.parts().items() for n, _ in mlp.named_arrays(f"{part}.")]
    o = manifest["optimizer"]
    opt = OptimizerState(
        [tensors[f"optimizer.m.{n}"] for n in names],
        [tensors[f"optimizer.v.{n}"] for n in names],
        o["step"],
        o["beta1"],
        o["beta2"],
        o["eps"],
    )
    aug = dict(manifest["augment"])
    aug["scale_range"] = tuple(aug["scale_range"])
    return Checkpoint(
        params,
        opt,
        train_config_from_dict(manifest["config"]),
        ModelConfig(**manifest["model"]),
        AugmentConfig(**aug),
        manifest["step"],
        manifest.get("extra", {}),
    )


def checkpoint_roundtrip(ckpt: Checkpoint, path: str | Path) -> Checkpoint:
    save_checkpoint(ckpt, path)
    return load_checkpoint(path)
