"""Finite-difference audit of every loss through the full network stack."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .diffcore import FDReport, Layer, MlpParams, finite_diff_check, init_mlp
from .losses import TcWeights, VicregWeights
from .models import ModelConfig, ModelParams, init_models
from .trainer import tc_forward_backward

TOY_MODEL = ModelConfig(obs_dim=6, rep_dim=5, proj_dim=7, encoder_hidden=[8])

# (vicreg weights, tc weights, arm) isolating each term; the regularizer is
# audited as the difference between upsilon=1 and upsilon=0
TERMS = {
    "invariance": (VicregWeights(1, 0, 0), TcWeights(0.0, 0.0), "tc"),
    "variance": (VicregWeights(0, 1, 0), TcWeights(0.0, 0.0), "tc"),
    "covariance": (VicregWeights(0, 0, 1), TcWeights(0.0, 0.0), "tc"),
    "equivariance": (VicregWeights(0, 0, 0), TcWeights(1.0, 0.0), "tc"),
    "equivariance_direct": (VicregWeights(0, 0, 0), TcWeights(1.0, 0.0), "tc_no_dm"),
    "total": (VicregWeights(), TcWeights(), "tc"),
}


@dataclass
class AuditResult:
    name: str
    report: FDReport

    def line(self) -> str:
        status = "PASS" if self.report.passed else "FAIL"
        return (
            f"{status} {self.name:<20} max_rel_err={self.report.max_rel_err:.3e} "
            f"n={self.report.n_checked} worst={self.report.worst}"
        )


def toy_problem(seed: int = 0, batch: int = 6, model: ModelConfig = TOY_MODEL):
    """Small networks and a batch of pairs. The predictor output layer is random
    so the displacement norm stays away from its kink at zero."""
    rng = np.random.default_rng(seed)
    params = init_models(model, seed)
    dims = params.predictor.dims
    pred = init_mlp(dims, seed=seed + 1)
    params = ModelParams(params.encoder, params.projector, pred)
    view_a = rng.normal(size=(batch, model.obs_dim))
    view_b = view_a + 0.3 * rng.normal(size=view_a.shape)
    dt = rng.integers(1, 13, size=batch) / 12.0
    return params, view_a, view_b, dt


def _audit(name, params, view_a, view_b, dt, vic, weights, arm, step, tol) -> AuditResult:
    def loss(_):
        return tc_forward_backward(params, view_a, view_b, dt, arm, vic, weights, need_grads=False)[0].total

    _, grads, _ = tc_forward_backward(params, view_a, view_b, dt, arm, vic, weights)
    parts = list(params.parts().values())
    return AuditResult(name, finite_diff_check(loss, parts, list(grads.parts().values()), step, tol))


def _audit_regularizer(params, view_a, view_b, dt, step, tol) -> AuditResult:
    vic = VicregWeights(0, 0, 0)
    on, off = TcWeights(1.0, 1.0), TcWeights(1.0, 0.0)

    def loss(_):
        a = tc_forward_backward(params, view_a, view_b, dt, "tc", vic, on, need_grads=False)[0]
        return a.regularization

    _, g_on, _ = tc_forward_backward(params, view_a, view_b, dt, "tc", vic, on)
    _, g_off, _ = tc_forward_backward(params, view_a, view_b, dt, "tc", vic, off)
    diff = [
        MlpParams([Layer(a.weight - b.weight, a.bias - b.bias, a.activation) for a, b in zip(p.layers, q.layers)])
        for p, q in zip(g_on.parts().values(), g_off.parts().values())
    ]
    return AuditResult("dm_regularization", finite_diff_check(loss, list(params.parts().values()), diff, step, tol))


def run_grad_check(seed: int = 0, step: float = 1e-5, tol: float = 1e-4) -> tuple[list[AuditResult], float]:
    """Audit every loss term; returns the results and the wall time in seconds."""
    t0 = time.perf_counter()
    params, view_a, view_b, dt = toy_problem(seed)
    results = [
        _audit(name, params, view_a, view_b, dt, vic, w, arm, step, tol)
        for name, (vic, w, arm) in TERMS.items()
    ]
    results.insert(4, _audit_regularizer(params, view_a, view_b, dt, step, tol))
    return results, time.perf_counter() - t0
