"""Dense MLPs in float64 with explicit reverse-mode gradients.

Batches are plain 2-D ``numpy.ndarray`` objects (rows = samples). Parameters
live in :class:`MlpParams`; a gradient store is just another ``MlpParams`` of
the same shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity")


class ConfigError(ValueError):
    """Invalid network configuration."""


class ShapeError(ValueError):
    """Array dimensions do not line up."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared in a computation."""


def check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(np.atleast_1d(arr)))[0].tolist()
        raise NonFiniteError(f"non-finite value in {where} at index {bad}")
    return arr


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class MlpParams:
    layers: list[Layer] = field(default_factory=list)

    @property
    def dims(self) -> list[int]:
        return [self.layers[0].fan_in] + [l.fan_out for l in self.layers]

    def arrays(self) -> list[np.ndarray]:
        """Weight/bias arrays in a fixed order (w0, b0, w1, b1, ...)."""
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    def named_arrays(self, prefix: str = "") -> list[tuple[str, np.ndarray]]:
        out = []
        for i, layer in enumerate(self.layers):
            out.append((f"{prefix}layers.{i}.weight", layer.weight))
            out.append((f"{prefix}layers.{i}.bias", layer.bias))
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def zeros_like(self) -> "MlpParams":
        return MlpParams(
            [
                Layer(np.zeros_like(l.weight), np.zeros_like(l.bias), l.activation)
                for l in self.layers
            ]
        )

    def equal(self, other: "MlpParams") -> bool:
        if len(self.layers) != len(other.layers):
            return False
        return all(
            a.activation == b.activation
            and np.array_equal(a.weight, b.weight)
            and np.array_equal(a.bias, b.bias)
            for a, b in zip(self.layers, other.layers)
        )


# A gradient store has exactly the parameter layout.
GradStore = MlpParams


@dataclass
class Trace:
    """Per-layer inputs and pre-activations recorded by :func:`mlp_apply`."""

    inputs: list[np.ndarray]
    preacts: list[np.ndarray]


def init_mlp(
    dims: Sequence[int],
    activations: Sequence[str] | None = None,
    seed: int = 0,
    zero_last: bool = False,
) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    ``activations`` defaults to relu on hidden layers and identity on the
    output. ``zero_last`` zeroes the final layer's weights.
    """
    dims = list(dims)
    if len(dims) < 2 or any(int(d) < 1 for d in dims):
        raise ConfigError(f"need >= 2 positive layer sizes, got {dims}")
    n_layers = len(dims) - 1
    if activations is None:
        activations = ["relu"] * (n_layers - 1) + ["identity"]
    activations = list(activations)
    if len(activations) != n_layers:
        raise ConfigError(f"{n_layers} layers but {len(activations)} activation tags")
    for act in activations:
        if act not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {act!r}")
    if activations[-1] != "identity":
        raise ConfigError("final layer activation must be identity")

    rng = np.random.default_rng(seed)
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        if zero_last and i == n_layers - 1:
            w = np.zeros_like(w)
        layers.append(Layer(w, np.zeros(fan_out), activations[i]))
    return MlpParams(layers)


def mlp_apply(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, Trace]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"input must be 2-D, got shape {x.shape}")
    if x.shape[1] != params.layers[0].fan_in:
        raise ShapeError(
            f"input has {x.shape[1]} columns, first layer expects {params.layers[0].fan_in}"
        )
    inputs, preacts = [], []
    h = x
    for layer in params.layers:
        inputs.append(h)
        a = h @ layer.weight.T + layer.bias
        preacts.append(a)
        h = np.maximum(a, 0.0) if layer.activation == "relu" else a
    check_finite(h, "mlp output")
    return h, Trace(inputs, preacts)


def mlp_backward(
    params: MlpParams, trace: Trace, upstream: np.ndarray
) -> tuple[GradStore, np.ndarray]:
    """Gradients of <upstream, output> w.r.t. every parameter and the input."""
    if len(trace.preacts) != len(params.layers):
        raise ShapeError("trace does not belong to these params")
    out_shape = trace.preacts[-1].shape
    if upstream.shape != out_shape:
        raise ShapeError(f"upstream shape {upstream.shape} != output shape {out_shape}")
    grads = []
    g = upstream
    for layer, h_in, a in zip(
        reversed(params.layers), reversed(trace.inputs), reversed(trace.preacts)
    ):
        if h_in.shape[1] != layer.fan_in or a.shape[1] != layer.fan_out:
            raise ShapeError("trace does not belong to these params")
        if layer.activation == "relu":
            g = g * (a > 0.0)
        grads.append(Layer(g.T @ h_in, g.sum(axis=0), layer.activation))
        g = g @ layer.weight
    check_finite(g, "input gradient")
    return MlpParams(grads[::-1]), g


def add_grads(acc: GradStore, other: GradStore) -> GradStore:
    for a, b in zip(acc.layers, other.layers):
        a.weight += b.weight
        a.bias += b.bias
    return acc


@dataclass
class FDReport:
    max_rel_err: float
    passed: bool
    worst: str  # location of the largest error
    n_checked: int


def _as_list(p):
    return list(p) if isinstance(p, (list, tuple)) else [p]


def finite_diff_check(
    loss_fn: Callable[..., float],
    params: MlpParams | Sequence[MlpParams],
    grads: MlpParams | Sequence[MlpParams],
    step: float = 1e-5,
    tol: float = 1e-4,
) -> FDReport:
    """Compare ``grads`` against central differences of ``loss_fn(params)``.

    Parameters are perturbed in place and restored. Relative error per entry
    is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    plist, glist = _as_list(params), _as_list(grads)
    if len(plist) != len(glist):
        raise ShapeError("params and grads differ in length")

    worst, worst_at, n = 0.0, "", 0
    for pi, (p, g) in enumerate(zip(plist, glist)):
        for (name, arr), garr in zip(p.named_arrays(f"[{pi}]."), g.arrays()):
            if arr.shape != garr.shape:
                raise ShapeError(f"gradient shape mismatch at {name}")
            flat = arr.reshape(-1)
            gflat = garr.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + step
                lp = float(loss_fn(params))
                flat[k] = orig - step
                lm = float(loss_fn(params))
                flat[k] = orig
                if not (np.isfinite(lp) and np.isfinite(lm)):
                    raise NonFiniteError(f"non-finite loss while perturbing {name}[{k}]")
                num = (lp - lm) / (2.0 * step)
                ana = float(gflat[k])
                rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                n += 1
                if rel > worst:
                    worst, worst_at = rel, f"{name}[{k}] analytic={ana:.6e} numeric={num:.6e}"
    return FDReport(worst, worst <= tol, worst_at, n)
