"""Sequential MLPs with hand-written backprop, Adam and Gaussian heads.

Everything is plain numpy in float64. A network is described by an
:class:`MlpSpec` and its weights live in an :class:`MlpParams`; the two are
kept apart so that specs can be serialized as headers and weights as arrays.

Layer order inside every block is ``linear -> batchnorm -> activation ->
dropout``, with batchnorm and dropout switched on per block.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

ACTIVATIONS = ("sigmoid", "relu", "identity")
LOGVAR_CLAMP = (-10.0, 10.0)
VARIANCE_FLOOR = 1e-8
BN_EPS = 1e-5


class RejectedInputError(ValueError):
    """Input of the wrong shape or containing non-finite values."""


class NonFiniteGradientError(FloatingPointError):
    """Raised when an optimizer receives NaN/inf gradients."""


@dataclass
class MlpSpec:
    layer_sizes: list[int]
    activations: list[str]
    batchnorm: list[bool]
    dropout: list[float]

    def __post_init__(self):
        self.layer_sizes = [int(s) for s in self.layer_sizes]
        n = len(self.layer_sizes) - 1
        if n < 1:
            raise ValueError("layer_sizes needs at least an input and an output size")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError(f"layer sizes must be positive, got {self.layer_sizes}")
        for name in ("activations", "batchnorm", "dropout"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} must have one entry per layer ({n})")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        for rate in self.dropout:
            if not 0.0 <= rate < 1.0:
                raise ValueError(f"dropout rate must be in [0, 1), got {rate}")

    @classmethod
    def build(
        cls,
        sizes: list[int],
        hidden: str = "sigmoid",
        output: str = "identity",
        batchnorm: bool = False,
        dropout: float = 0.0,
        output_batchnorm: bool | None = None,
    ) -> "MlpSpec":
        """Spec with one activation for hidden blocks and another for the last block.

        Dropout is applied to hidden blocks only; ``output_batchnorm`` defaults
        to ``batchnorm``.
        """
        n = len(sizes) - 1
        if output_batchnorm is None:
            output_batchnorm = batchnorm
        return cls(
            layer_sizes=list(sizes),
            activations=[hidden] * (n - 1) + [output],
            batchnorm=[batchnorm] * (n - 1) + [output_batchnorm],
            dropout=[dropout] * (n - 1) + [0.0],
        )

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def d_in(self) -> int:
        return self.layer_sizes[0]

    @property
    def d_out(self) -> int:
        return self.layer_sizes[-1]

    def to_dict(self) -> dict[str, Any]:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activations": list(self.activations),
            "batchnorm": [bool(b) for b in self.batchnorm],
            "dropout": [float(r) for r in self.dropout],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MlpSpec":
        return cls(**d)


@dataclass
class MlpParams:
    """Learnable arrays plus non-learnable batchnorm running statistics.

    Keys are ``W{i}``, ``b{i}`` and, for batchnorm blocks, ``gamma{i}`` and
    ``beta{i}``; buffers hold ``rmean{i}`` and ``rvar{i}``.
    """

    arrays: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "MlpParams":
        return MlpParams(
            {k: v.copy() for k, v in self.arrays.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.arrays):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.arrays[k]).tobytes())
        for k in sorted(self.buffers):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.buffers[k]).tobytes())
        return h.hexdigest()


def init_params(spec: MlpSpec, rng: np.random.Generator) -> MlpParams:
    """Glorot-uniform weights, zero biases, unit batchnorm scale."""
    arrays: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    for i in range(spec.n_layers):
        fan_in, fan_out = spec.layer_sizes[i], spec.layer_sizes[i + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        arrays[f"W{i}"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        arrays[f"b{i}"] = np.zeros(fan_out)
        if spec.batchnorm[i]:
            arrays[f"gamma{i}"] = np.ones(fan_out)
            arrays[f"beta{i}"] = np.zeros(fan_out)
            buffers[f"rmean{i}"] = np.zeros(fan_out)
            buffers[f"rvar{i}"] = np.ones(fan_out)
    return MlpParams(arrays, buffers)


def check_params(spec: MlpSpec, params: MlpParams) -> None:
    for i in range(spec.n_layers):
        shape = (spec.layer_sizes[i], spec.layer_sizes[i + 1])
        W = params.arrays.get(f"W{i}")
        if W is None or W.shape != shape:
            raise RejectedInputError(f"W{i} should have shape {shape}")
        if params.arrays[f"b{i}"].shape != (shape[1],):
            raise RejectedInputError(f"b{i} should have shape {(shape[1],)}")
        if spec.batchnorm[i] and f"gamma{i}" not in params.arrays:
            raise RejectedInputError(f"layer {i} uses batchnorm but has no gamma{i}")


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _activate(name: str, x: np.ndarray) -> np.ndarray:
    if name == "sigmoid":
        return sigmoid(x)
    if name == "relu":
        return np.maximum(x, 0.0)
    return x


def _activate_grad(name: str, pre: np.ndarray, post: np.ndarray, g: np.ndarray) -> np.ndarray:
    if name == "sigmoid":
        return g * post * (1.0 - post)
    if name == "relu":
        return g * (pre > 0)
    return g


@dataclass
class ForwardCache:
    """Intermediates recorded by a forward pass, consumed by :func:`backward`."""

    mode: str
    inputs: list[np.ndarray] = field(default_factory=list)
    pre_bn: list[np.ndarray | None] = field(default_factory=list)
    xhat: list[np.ndarray | None] = field(default_factory=list)
    inv_std: list[np.ndarray | None] = field(default_factory=list)
    batch_mean: list[np.ndarray | None] = field(default_factory=list)
    batch_var: list[np.ndarray | None] = field(default_factory=list)
    pre_act: list[np.ndarray] = field(default_factory=list)
    post_act: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray | None] = field(default_factory=list)


def _check_input(spec: MlpSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.d_in:
        raise RejectedInputError(
            f"expected input of width {spec.d_in}, got shape {np.shape(x)}"
        )
    if not np.all(np.isfinite(x)):
        raise RejectedInputError("input contains non-finite values")
    return x


def forward(
    spec: MlpSpec,
    params: MlpParams,
    x: np.ndarray,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
    return_cache: bool = False,
):
    """Run the network on a ``[batch, d_in]`` matrix.

    In ``train`` mode batchnorm uses batch statistics and dropout masks are
    drawn from ``rng`` (required whenever a block has non-zero dropout). In
    ``infer`` mode batchnorm uses running statistics and dropout is off.
    Running statistics are never updated here; see :func:`update_running_stats`.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    check_params(spec, params)
    h = _check_input(spec, x)
    cache = ForwardCache(mode=mode)
    for i in range(spec.n_layers):
        cache.inputs.append(h)
        a = h @ params.arrays[f"W{i}"] + params.arrays[f"b{i}"]
        if spec.batchnorm[i]:
            cache.pre_bn.append(a)
            if mode == "train":
                mean = a.mean(axis=0)
                var = a.var(axis=0)
            else:
                mean = params.buffers[f"rmean{i}"]
                var = params.buffers[f"rvar{i}"]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (a - mean) * inv_std
            a = params.arrays[f"gamma{i}"] * xhat + params.arrays[f"beta{i}"]
            cache.xhat.append(xhat)
            cache.inv_std.append(inv_std)
            cache.batch_mean.append(mean)
            cache.batch_var.append(var)
        else:
            for lst in (cache.pre_bn, cache.xhat, cache.inv_std, cache.batch_mean, cache.batch_var):
                lst.append(None)
        cache.pre_act.append(a)
        h = _activate(spec.activations[i], a)
        cache.post_act.append(h)
        rate = spec.dropout[i]
        if mode == "train" and rate > 0.0:
            if rng is None:
                raise ValueError("train-mode dropout needs an rng")
            mask = (rng.random(h.shape) >= rate) / (1.0 - rate)
            h = h * mask
            cache.masks.append(mask)
        else:
            cache.masks.append(None)
    if return_cache:
        return h, cache
    return h


def backward(
    spec: MlpSpec, params: MlpParams, cache: ForwardCache, upstream: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of ``sum(upstream * output)`` w.r.t. parameters and input."""
    g = np.asarray(upstream, dtype=float)
    expected = cache.post_act[-1].shape
    if g.shape != expected:
        raise RejectedInputError(f"upstream gradient shape {g.shape} != output shape {expected}")
    grads: dict[str, np.ndarray] = {}
    for i in reversed(range(spec.n_layers)):
        if cache.masks[i] is not None:
            g = g * cache.masks[i]
        g = _activate_grad(spec.activations[i], cache.pre_act[i], cache.post_act[i], g)
        if spec.batchnorm[i]:
            xhat = cache.xhat[i]
            grads[f"gamma{i}"] = (g * xhat).sum(axis=0)
            grads[f"beta{i}"] = g.sum(axis=0)
            gx = g * params.arrays[f"gamma{i}"]
            if cache.mode == "train":
                n = gx.shape[0]
                g = cache.inv_std[i] / n * (
                    n * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0)
                )
            else:
                g = gx * cache.inv_std[i]
        h_in = cache.inputs[i]
        grads[f"W{i}"] = h_in.T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ params.arrays[f"W{i}"].T
    return grads, g


def update_running_stats(
    spec: MlpSpec, params: MlpParams, cache: ForwardCache, momentum: float = 0.9
) -> None:
    """Blend the batch statistics of a train-mode pass into the running buffers."""
    if cache.mode != "train":
        return
    n = cache.inputs[0].shape[0]
    for i in range(spec.n_layers):
        if not spec.batchnorm[i]:
            continue
        unbiased = cache.batch_var[i] * n / max(n - 1, 1)
        params.buffers[f"rmean{i}"] = momentum * params.buffers[f"rmean{i}"] + (1 - momentum) * cache.batch_mean[i]
        params.buffers[f"rvar{i}"] = momentum * params.buffers[f"rvar{i}"] + (1 - momentum) * unbiased


@dataclass
class EarlyStopping:
    """Stop once the validation loss has failed to improve ``patience + 1`` epochs in a row."""

    max_epochs: int = 500
    patience: int = 10
    min_delta: float = 0.0
    best: float = field(default=np.inf, init=False)
    wait: int = field(default=0, init=False)

    def update(self, loss: float) -> tuple[bool, bool]:
        """Record one epoch's validation loss; returns ``(improved, stop)``."""
        if loss < self.best - self.min_delta:
            self.best, self.wait = loss, 0
            return True, False
        self.wait += 1
        return False, self.wait > self.patience


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, arrays: dict[str, np.ndarray], learning_rate: float = 1e-3, **kw) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in arrays.items()},
            v={k: np.zeros_like(v) for k, v in arrays.items()},
            learning_rate=learning_rate,
            **kw,
        )


def adam_step(
    arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in place and returned.

    Only keys present in ``grads`` are touched, so frozen sub-networks are
    simply left out of the gradient dict. The whole update is aborted if any
    gradient entry is non-finite.
    """
    for k, g in grads.items():
        if k not in arrays or g.shape != arrays[k].shape:
            raise RejectedInputError(f"gradient {k!r} does not match a parameter")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {k!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        arrays[k] -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return arrays, state


@dataclass
class GaussianParams:
    """Diagonal Gaussian; rows index samples when the arrays are 2-D."""

    mean: np.ndarray
    log_variance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.log_variance = np.asarray(self.log_variance, dtype=float)
        if self.mean.shape != self.log_variance.shape:
            raise ValueError("mean and log_variance must have equal shapes")

    @property
    def variance(self) -> np.ndarray:
        return np.maximum(np.exp(self.log_variance), VARIANCE_FLOOR)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)


def split_gaussian_head(out: np.ndarray) -> tuple[GaussianParams, np.ndarray]:
    """Split a ``2*dim`` head into mean and clamped log-variance.

    Returns the Gaussian and a mask that is 1 where the log-variance was not
    clamped (the clamp passes no gradient).
    """
    dim = out.shape[-1] // 2
    mean = out[..., :dim]
    raw = out[..., dim:]
    lo, hi = LOGVAR_CLAMP
    logvar = np.clip(raw, lo, hi)
    return GaussianParams(mean, logvar), ((raw > lo) & (raw < hi)).astype(float)


def sample_gaussian(
    params: GaussianParams,
    rng: np.random.Generator | None = None,
    eps: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Reparameterized draw ``mean + std * eps``; returns ``(sample, eps)``.

    Pass ``eps`` to fix the noise, e.g. for finite-difference checks.
    """
    if eps is None:
        if rng is None:
            raise ValueError("need either rng or eps")
        eps = rng.standard_normal(params.mean.shape)
    eps = np.asarray(eps, dtype=float)
    return params.mean + params.std * eps, eps


def gaussian_log_density(x: np.ndarray, mean: np.ndarray, log_variance: np.ndarray) -> np.ndarray:
    """Diagonal Gaussian log-density summed over the last axis."""
    var = np.maximum(np.exp(log_variance), VARIANCE_FLOOR)
    return -0.5 * np.sum(np.log(2 * np.pi) + np.log(var) + (x - mean) ** 2 / var, axis=-1)


def kl_standard_normal(g: GaussianParams) -> np.ndarray:
    """KL(N(mean, diag var) || N(0, I)) summed over the last axis."""
    return 0.5 * np.sum(g.mean**2 + g.variance - 1.0 - np.log(g.variance), axis=-1)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    m = logits.max(axis=axis, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax(logits, axis=axis))


# -- serialization ---------------------------------------------------------


def _array_doc(name: str, a: np.ndarray) -> dict[str, Any]:
    return {"name": name, "shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def params_to_doc(spec: MlpSpec, params: MlpParams) -> dict[str, Any]:
    """JSON-ready document; floats use repr, which round-trips exactly."""
    return {
        "spec": spec.to_dict(),
        "arrays": [_array_doc(k, params.arrays[k]) for k in sorted(params.arrays)],
        "buffers": [_array_doc(k, params.buffers[k]) for k in sorted(params.buffers)],
    }


def params_from_doc(doc: dict[str, Any]) -> tuple[MlpSpec, MlpParams]:
    spec = MlpSpec.from_dict(doc["spec"])

    def load(entries):
        return {
            e["name"]: np.asarray(e["data"], dtype=float).reshape(e["shape"]) for e in entries
        }

    params = MlpParams(load(doc["arrays"]), load(doc.get("buffers", [])))
    check_params(spec, params)
    return spec, params


def save_params(path: str | Path, spec: MlpSpec, params: MlpParams) -> None:
    Path(path).write_text(json.dumps(params_to_doc(spec, params)))


def load_params(path: str | Path) -> tuple[MlpSpec, MlpParams]:
    return params_from_doc(json.loads(Path(path).read_text()))
