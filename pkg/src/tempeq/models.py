"""Encoder, projector and displacement predictor networks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import MlpParams, ShapeError, init_mlp, mlp_apply


class DomainError(ValueError):
    """Normalized time gap outside [0, 1]."""


@dataclass
class ModelConfig:
    obs_dim: int = 64
    rep_dim: int = 128
    proj_dim: int = 256
    # hidden widths of the encoder; the predictor hidden width equals rep_dim
    encoder_hidden: list[int] = field(default_factory=lambda: [128])

    def validate(self) -> None:
        for name in ("obs_dim", "rep_dim", "proj_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be >= 1")
        if any(h < 1 for h in self.encoder_hidden):
            raise ValueError("model.encoder_hidden entries must be >= 1")


@dataclass
class ModelParams:
    encoder: MlpParams
    projector: MlpParams
    predictor: MlpParams

    def parts(self) -> dict[str, MlpParams]:
        return {"encoder": self.encoder, "projector": self.projector, "predictor": self.predictor}

    def copy(self) -> "ModelParams":
        return ModelParams(self.encoder.copy(), self.projector.copy(), self.predictor.copy())


def init_models(cfg: ModelConfig, seed: int) -> ModelParams:
    """Fresh networks. The predictor's output layer starts at zero so h = identity."""
    cfg.validate()
    ss = np.random.SeedSequence(seed)
    s_enc, s_proj, s_pred = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
    encoder = init_mlp([cfg.obs_dim, *cfg.encoder_hidden, cfg.rep_dim], seed=s_enc)
    projector = init_mlp([cfg.rep_dim, cfg.proj_dim, cfg.proj_dim, cfg.proj_dim], seed=s_proj)
    predictor = init_mlp([cfg.rep_dim + 1, cfg.rep_dim, cfg.rep_dim], seed=s_pred, zero_last=True)
    return ModelParams(encoder, projector, predictor)


def encode(encoder: MlpParams, batch: np.ndarray) -> np.ndarray:
    return mlp_apply(encoder, batch)[0]


def project(projector: MlpParams, reps: np.ndarray) -> np.ndarray:
    return mlp_apply(projector, reps)[0]


def predictor_input(reps: np.ndarray, dt_norm) -> np.ndarray:
    """Concatenate ``[r, dt]`` row-wise after validating the time gap."""
    reps = np.asarray(reps, dtype=np.float64)
    dt = np.broadcast_to(np.asarray(dt_norm, dtype=np.float64), (reps.shape[0],))
    if np.any(dt < 0.0) or np.any(dt > 1.0) or not np.all(np.isfinite(dt)):
        raise DomainError("normalized time gap must lie in [0, 1]")
    return np.concatenate([reps, dt[:, None]], axis=1)


def predict_displacement(predictor: MlpParams, reps: np.ndarray, dt_norm) -> np.ndarray:
    inp = predictor_input(reps, dt_norm)
    if inp.shape[1] != predictor.layers[0].fan_in:
        raise ShapeError(
            f"predictor expects rep_dim {predictor.layers[0].fan_in - 1}, got {reps.shape[1]}"
        )
    return mlp_apply(predictor, inp)[0]


def propagate(predictor: MlpParams, reps: np.ndarray, dt_norm) -> np.ndarray:
    """Move representations forward in time: r + displacement(r, dt)."""
    return np.asarray(reps, dtype=np.float64) + predict_displacement(predictor, reps, dt_norm)


def propagate_direct(predictor: MlpParams, reps: np.ndarray, dt_norm) -> np.ndarray:
    """No-skip variant: the predictor output is the future representation itself."""
    return predict_displacement(predictor, reps, dt_norm)
