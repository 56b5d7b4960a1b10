"""Gaussian-mixture variational autoencoder with a per-class mixture prior.

Generative side: ``w ~ N(0, I)``, ``v | y ~ Mult(pi(y))``, ``z | w, y, v`` is
the Gaussian of component ``v`` of class ``y`` with mean/variance read from
the ``beta`` network, and ``x | z`` is decoded by ``theta``. The encoder
factorizes as ``p(v | z, w, y) q(w | x, y) q(z | x)``.

Training runs in two phases: ``phi_z`` is pretrained on the known classes
and frozen, then ``theta``, ``beta`` and ``phi_w`` maximize the ELBO.
All gradients are analytic.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import nn
from .nn import EarlyStopping
from .geometry import CentroidSet, RejectedDatasetError, compute_centroids

log = logging.getLogger(__name__)

NETWORKS = ("phi_z", "phi_w", "beta", "theta")
TERMS = ("reconstruction", "latent_covering", "w_prior", "v_prior")
LOG_2PI = np.log(2 * np.pi)


class TrainingDivergedError(FloatingPointError):
    """Non-finite objective during training; ``model`` is the last good checkpoint."""

    def __init__(self, message: str, model: "GmvaeModel | None" = None, term: str | None = None):
        super().__init__(message)
        self.model = model
        self.term = term


@dataclass
class GmvaeConfig:
    n_classes: int
    components: list[int] | None = None
    dim_z: int = 10
    dim_w: int = 10
    class_prior: list[list[float]] | None = None
    # (kind, start, stop) column ranges of the encoded input; kind is
    # "gaussian" or "bernoulli". Empty means one gaussian block over all columns.
    likelihood_blocks: list[tuple[str, int, int]] = field(default_factory=list)
    phi_z_hidden: list[int] = field(default_factory=lambda: [100, 50])
    phi_w_hidden: list[int] = field(default_factory=list)
    beta_hidden: list[int] = field(default_factory=lambda: [20, 20])
    # None mirrors phi_z_hidden.
    theta_hidden: list[int] | None = None
    activation: str = "sigmoid"
    # "classifier": cross-entropy of a softmax head on the encoder mean.
    # "classifier_reconstruction": the same plus a weighted reconstruction of x
    # decoded from the encoder mean, so the frozen embedding keeps feature
    # structure beyond what separates the known classes.
    pretrain_objective: str = "classifier_reconstruction"
    pretrain_reconstruction_weight: float = 0.1
    learning_rate: float = 1e-3
    batch_size: int = 128
    mc_samples: int = 1

    def __post_init__(self):
        if self.components is None:
            self.components = [1] * self.n_classes
        self.components = [int(k) for k in self.components]
        self.likelihood_blocks = [tuple(b) for b in self.likelihood_blocks]
        if self.n_classes < 2:
            raise ValueError("need at least two known classes")
        if len(self.components) != self.n_classes or min(self.components) < 1:
            raise ValueError("components needs one positive count per class")
        if self.dim_z < 1 or self.dim_w < 1:
            raise ValueError("latent dimensions must be positive")
        if self.class_prior is None:
            self.class_prior = [[1.0 / k] * k for k in self.components]
        for k, row in zip(self.components, self.class_prior):
            row = np.asarray(row, dtype=float)
            if row.shape != (k,) or np.any(row < 0) or abs(row.sum() - 1.0) > 1e-9:
                raise ValueError("each class_prior row must be a probability vector over its components")
        if self.pretrain_objective not in ("classifier", "classifier_reconstruction"):
            raise ValueError(f"unknown pretrain objective {self.pretrain_objective!r}")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")

    @property
    def total_components(self) -> int:
        return int(sum(self.components))

    @property
    def component_offsets(self) -> list[int]:
        return [int(o) for o in np.concatenate([[0], np.cumsum(self.components)[:-1]])]

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["likelihood_blocks"] = [list(b) for b in self.likelihood_blocks]
        return d


@dataclass
class ElboBreakdown:
    reconstruction: float
    latent_covering: float
    w_prior: float
    v_prior: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


@dataclass
class GmvaeModel:
    config: GmvaeConfig
    d_in: int
    specs: dict[str, nn.MlpSpec]
    params: dict[str, nn.MlpParams]
    phi_z_frozen: bool = False

    def copy(self) -> "GmvaeModel":
        return GmvaeModel(
            copy.deepcopy(self.config),
            self.d_in,
            dict(self.specs),
            {k: p.copy() for k, p in self.params.items()},
            self.phi_z_frozen,
        )

    @property
    def blocks(self) -> list[tuple[str, int, int]]:
        return self.config.likelihood_blocks or [("gaussian", 0, self.d_in)]


def build_model(config: GmvaeConfig, d_in: int, seed: int = 0) -> GmvaeModel:
    """Fresh model with the default layer layout of the four GMVAE networks."""
    cfg = config
    act = cfg.activation
    theta_hidden = cfg.theta_hidden if cfg.theta_hidden is not None else list(reversed(cfg.phi_z_hidden))
    specs = {
        "phi_z": nn.MlpSpec.build([d_in, *cfg.phi_z_hidden, 2 * cfg.dim_z], hidden=act),
        "phi_w": nn.MlpSpec.build([d_in + cfg.n_classes, *cfg.phi_w_hidden, 2 * cfg.dim_w], hidden=act),
        "beta": nn.MlpSpec.build(
            [cfg.dim_w, *cfg.beta_hidden, 2 * cfg.total_components * cfg.dim_z], hidden=act
        ),
        "theta": nn.MlpSpec.build([cfg.dim_z, *theta_hidden, d_in], hidden=act),
        # classification head used only while pretraining phi_z
        "head": nn.MlpSpec.build([cfg.dim_z, cfg.n_classes]),
    }
    rng = np.random.default_rng(seed)
    params = {name: nn.init_params(specs[name], rng) for name in ("phi_z", "phi_w", "beta", "theta", "head")}
    model = GmvaeModel(cfg, d_in, specs, params)
    for kind, start, stop in model.blocks:
        if kind not in ("gaussian", "bernoulli") or not 0 <= start < stop <= d_in:
            raise ValueError(f"bad likelihood block {(kind, start, stop)}")
    return model


def _check_x(model: GmvaeModel, x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != model.d_in:
        raise nn.RejectedInputError(f"expected {model.d_in} features, got {x.shape[1]}")
    return x


def _check_onehot(model: GmvaeModel, y: np.ndarray) -> np.ndarray:
    y = np.atleast_2d(np.asarray(y, dtype=float))
    C = model.config.n_classes
    if y.shape[1] != C or not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=1) == 1):
        raise nn.RejectedInputError(f"y must be one-hot rows over {C} classes")
    return y


def one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise nn.RejectedInputError(f"labels must lie in 0..{n_classes - 1}")
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def encode_z(model: GmvaeModel, x: np.ndarray) -> nn.GaussianParams:
    x = _check_x(model, x)
    out = nn.forward(model.specs["phi_z"], model.params["phi_z"], x)
    return nn.split_gaussian_head(out)[0]


def encode_w(model: GmvaeModel, x: np.ndarray, y: np.ndarray) -> nn.GaussianParams:
    """``q(w | x, y)``; ``y`` is one-hot and is concatenated onto ``x``."""
    x = _check_x(model, x)
    y = _check_onehot(model, y)
    if len(x) != len(y):
        raise nn.RejectedInputError("x and y batch sizes differ")
    out = nn.forward(model.specs["phi_w"], model.params["phi_w"], np.hstack([x, y]))
    return nn.split_gaussian_head(out)[0]


def _split_prior(model: GmvaeModel, out: np.ndarray):
    cfg = model.config
    n = out.shape[0]
    half = cfg.total_components * cfg.dim_z
    mean = out[:, :half].reshape(n, cfg.total_components, cfg.dim_z)
    raw = out[:, half:].reshape(n, cfg.total_components, cfg.dim_z)
    lo, hi = nn.LOGVAR_CLAMP
    return mean, np.clip(raw, lo, hi), ((raw > lo) & (raw < hi)).astype(float)


def prior_components(model: GmvaeModel, w: np.ndarray) -> list[list[nn.GaussianParams]]:
    """Per-class, per-component Gaussians over ``z`` given ``w``.

    ``w`` is one sample (1-D) or a batch; each entry of the returned grid
    holds arrays with a leading batch axis when ``w`` is 2-D.
    """
    w = np.asarray(w, dtype=float)
    single = w.ndim == 1
    w2 = np.atleast_2d(w)
    if w2.shape[1] != model.config.dim_w:
        raise nn.RejectedInputError(f"w must have dimension {model.config.dim_w}")
    out = nn.forward(model.specs["beta"], model.params["beta"], w2)
    mean, logvar, _ = _split_prior(model, out)
    grid = []
    for c, (off, k) in enumerate(zip(model.config.component_offsets, model.config.components)):
        row = []
        for j in range(off, off + k):
            m, lv = mean[:, j], logvar[:, j]
            row.append(nn.GaussianParams(m[0] if single else m, lv[0] if single else lv))
        grid.append(row)
    return grid


def _responsibilities(log_prior: np.ndarray, log_dens: np.ndarray):
    """Posterior over components; flags rows where every density underflowed.

    Densities are combined in log space, so only ``-inf`` log-densities
    count as underflow; those rows get the prior back.
    """
    a = log_prior[None, :] + log_dens
    underflow = ~np.any(np.isfinite(a), axis=1)
    safe = np.where(underflow[:, None], log_prior[None, :], a)
    r = nn.softmax(safe, axis=1)
    return r, underflow


def component_posterior(
    model: GmvaeModel, z: np.ndarray, w: np.ndarray, y: np.ndarray
) -> tuple[np.ndarray, bool]:
    """``p(v | z, w, y)`` for one sample: returns ``(probabilities, fell_back)``.

    ``fell_back`` is true when every component density underflowed and the
    prior ``pi(y)`` was returned instead.
    """
    y = _check_onehot(model, y)[0]
    c = int(np.argmax(y))
    grid = prior_components(model, np.asarray(w, dtype=float).ravel())[c]
    z = np.asarray(z, dtype=float).ravel()
    log_dens = np.array([[nn.gaussian_log_density(z, g.mean, g.log_variance) for g in grid]])
    log_prior = np.log(np.asarray(model.config.class_prior[c], dtype=float))
    r, flag = _responsibilities(log_prior, log_dens)
    return r[0], bool(flag[0])


# -- ELBO ------------------------------------------------------------------


def _reconstruction(model: GmvaeModel, x: np.ndarray, out: np.ndarray):
    """Per-sample log p(x|z) and its gradient w.r.t. the decoder output."""
    ll = np.zeros(len(x))
    grad = np.zeros_like(out)
    for kind, s, e in model.blocks:
        xb, ob = x[:, s:e], out[:, s:e]
        if kind == "gaussian":
            ll += -0.5 * np.sum((xb - ob) ** 2 + LOG_2PI, axis=1)
            grad[:, s:e] = xb - ob
        else:
            ll += np.sum(xb * ob - np.logaddexp(0.0, ob), axis=1)
            grad[:, s:e] = xb - nn.sigmoid(ob)
    return ll, grad


def elbo_terms(
    model: GmvaeModel,
    x: np.ndarray,
    labels: np.ndarray,
    eps_z: np.ndarray,
    eps_w: np.ndarray,
    weights: dict[str, float] | None = None,
    with_grads: bool = False,
):
    """Single-sample ELBO with fixed reparameterization noise.

    Returns ``(breakdown, grads)`` where ``grads`` maps network name to the
    gradient of ``mean(-w_R*R + w_L*L + w_W*W + w_V*V)`` (the weighted
    negative ELBO) w.r.t. its parameters, or ``None`` when not requested.
    ``phi_z`` gradients are only produced when the encoder is not frozen.
    """
    cfg = model.config
    weights = {t: 1.0 for t in TERMS} | (weights or {})
    x = _check_x(model, x)
    labels = np.asarray(labels, dtype=int)
    n = len(x)
    y = one_hot(labels, cfg.n_classes)
    S = model.specs
    P = model.params

    out_z, cache_z = nn.forward(S["phi_z"], P["phi_z"], x, return_cache=True)
    qz, mask_z = nn.split_gaussian_head(out_z)
    std_z = np.exp(0.5 * qz.log_variance)
    z = qz.mean + std_z * eps_z

    xw = np.hstack([x, y])
    out_w, cache_w = nn.forward(S["phi_w"], P["phi_w"], xw, return_cache=True)
    qw, mask_w = nn.split_gaussian_head(out_w)
    std_w = np.exp(0.5 * qw.log_variance)
    w = qw.mean + std_w * eps_w

    out_b, cache_b = nn.forward(S["beta"], P["beta"], w, return_cache=True)
    pm, plv, pmask = _split_prior(model, out_b)

    out_x, cache_x = nn.forward(S["theta"], P["theta"], z, return_cache=True)
    recon, drecon_out = _reconstruction(model, x, out_x)

    log_q = -0.5 * np.sum(LOG_2PI + qz.log_variance + eps_z**2, axis=1)
    w_kl = 0.5 * np.sum(qw.mean**2 + np.exp(qw.log_variance) - 1.0 - qw.log_variance, axis=1)

    covering = np.zeros(n)
    v_kl = np.zeros(n)
    dz_prior = np.zeros_like(z)
    d_pm = np.zeros_like(pm)
    d_plv = np.zeros_like(plv)
    wl, wv = weights["latent_covering"], weights["v_prior"]
    for c, (off, k) in enumerate(zip(cfg.component_offsets, cfg.components)):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            continue
        zc = z[idx][:, None, :]
        mu = pm[idx, off:off + k]
        lv = plv[idx, off:off + k]
        var = np.exp(lv)
        diff = zc - mu
        log_p = -0.5 * np.sum(LOG_2PI + lv + diff**2 / var, axis=2)
        log_pi = np.log(np.asarray(cfg.class_prior[c], dtype=float))
        r, _ = _responsibilities(log_pi, log_p)
        T = np.sum(r * log_p, axis=1)
        covering[idx] = log_q[idx] - T
        with np.errstate(divide="ignore", invalid="ignore"):
            v_kl[idx] = np.sum(np.where(r > 0, r * (np.log(r) - log_pi), 0.0), axis=1)
        if with_grads:
            # d/d log p_k of (wl*covering + wv*v_kl), per sample
            base = r * (log_p - T[:, None])
            da = (-wl * (r + base) + wv * base) / n
            dz_prior[idx] += np.sum(da[:, :, None] * (-diff / var), axis=1)
            d_pm[idx, off:off + k] += da[:, :, None] * (diff / var)
            d_plv[idx, off:off + k] += da[:, :, None] * (-0.5 + 0.5 * diff**2 / var)

    total = recon - covering - w_kl - v_kl
    terms = {
        "reconstruction": recon,
        "latent_covering": covering,
        "w_prior": w_kl,
        "v_prior": v_kl,
    }
    for name, vals in terms.items():
        if not np.all(np.isfinite(vals)):
            raise TrainingDivergedError(f"non-finite {name} term", term=name)
    breakdown = ElboBreakdown(
        reconstruction=float(recon.mean()),
        latent_covering=float(covering.mean()),
        w_prior=float(w_kl.mean()),
        v_prior=float(v_kl.mean()),
        total=float(total.mean()),
    )
    if not with_grads:
        return breakdown, None

    grads: dict[str, dict[str, np.ndarray]] = {}
    wr, ww = weights["reconstruction"], weights["w_prior"]

    g_theta, dz_recon = nn.backward(S["theta"], P["theta"], cache_x, -wr * drecon_out / n)
    grads["theta"] = g_theta

    d_out_b = np.hstack([
        d_pm.reshape(n, -1),
        (d_plv * pmask).reshape(n, -1),
    ])
    g_beta, dw = nn.backward(S["beta"], P["beta"], cache_b, d_out_b)
    grads["beta"] = g_beta

    d_muw = dw + ww * qw.mean / n
    d_lvw = dw * eps_w * 0.5 * std_w + ww * 0.5 * (np.exp(qw.log_variance) - 1.0) / n
    g_phiw, _ = nn.backward(S["phi_w"], P["phi_w"], cache_w, np.hstack([d_muw, d_lvw * mask_w]))
    grads["phi_w"] = g_phiw

    if not model.phi_z_frozen:
        dz = dz_recon + dz_prior
        d_muz = dz
        d_lvz = dz * eps_z * 0.5 * std_z - wl * 0.5 / n
        g_phiz, _ = nn.backward(S["phi_z"], P["phi_z"], cache_z, np.hstack([d_muz, d_lvz * mask_z]))
        grads["phi_z"] = g_phiz
    return breakdown, grads


def elbo(
    model: GmvaeModel,
    x: np.ndarray,
    labels: np.ndarray,
    mc_samples: int = 1,
    rng: np.random.Generator | None = None,
    seed: int = 0,
) -> ElboBreakdown:
    """Monte-Carlo ELBO estimate averaged over the batch and ``mc_samples`` draws."""
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= model.config.n_classes):
        raise nn.RejectedInputError("labels outside the known classes")
    rng = rng if rng is not None else np.random.default_rng(seed)
    n = len(np.atleast_2d(x))
    acc = np.zeros(5)
    for _ in range(mc_samples):
        ez = rng.standard_normal((n, model.config.dim_z))
        ew = rng.standard_normal((n, model.config.dim_w))
        b, _ = elbo_terms(model, x, labels, ez, ew)
        acc += [b.reconstruction, b.latent_covering, b.w_prior, b.v_prior, b.total]
    acc /= mc_samples
    return ElboBreakdown(*map(float, acc))


# -- training --------------------------------------------------------------


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _check_classes(labels: np.ndarray, n_classes: int) -> None:
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=n_classes)
    if len(counts) > n_classes:
        raise RejectedDatasetError("labels outside the known classes")
    if np.any(counts == 0):
        raise RejectedDatasetError(f"empty class(es): {np.flatnonzero(counts == 0).tolist()}")


def _pretrain_loss(model: GmvaeModel, x: np.ndarray, labels: np.ndarray, with_grads: bool):
    S, P = model.specs, model.params
    n = len(x)
    out_z, cache_z = nn.forward(S["phi_z"], P["phi_z"], x, return_cache=True)
    mu = out_z[:, :model.config.dim_z]
    logits, cache_h = nn.forward(S["head"], P["head"], mu, return_cache=True)
    logp = nn.log_softmax(logits)
    loss = -float(np.mean(logp[np.arange(n), labels]))
    recon_out = cache_t = None
    if model.config.pretrain_objective == "classifier_reconstruction":
        recon_out, cache_t = nn.forward(S["theta"], P["theta"], mu, return_cache=True)
        ll, dll = _reconstruction(model, x, recon_out)
        rw = model.config.pretrain_reconstruction_weight
        loss += -rw * float(ll.mean())
        dll = rw * dll
    if not with_grads:
        return loss, None
    dlogits = (np.exp(logp) - one_hot(labels, model.config.n_classes)) / n
    g_head, dmu = nn.backward(S["head"], P["head"], cache_h, dlogits)
    grads = {"head": g_head}
    if cache_t is not None:
        g_theta, dmu_t = nn.backward(S["theta"], P["theta"], cache_t, -dll / n)
        grads["theta"] = g_theta
        dmu = dmu + dmu_t
    dout = np.zeros_like(out_z)
    dout[:, :model.config.dim_z] = dmu
    grads["phi_z"], _ = nn.backward(S["phi_z"], P["phi_z"], cache_z, dout)
    return loss, grads


def pretrain_loss(model: GmvaeModel, x: np.ndarray, labels: np.ndarray) -> float:
    """Objective minimized while pretraining ``phi_z`` (cross-entropy of a
    softmax head on the encoder mean, plus reconstruction when configured)."""
    return _pretrain_loss(model, _check_x(model, x), np.asarray(labels, dtype=int), False)[0]


def _adam_states(model: GmvaeModel, names) -> dict[str, nn.AdamState]:
    return {k: nn.AdamState.for_params(model.params[k].arrays, model.config.learning_rate) for k in names}


def pretrain_phi_z(
    model: GmvaeModel,
    x: np.ndarray,
    labels: np.ndarray,
    epochs: int = 100,
    seed: int = 0,
) -> GmvaeModel:
    """Fit ``phi_z`` on the known classes, then freeze it. Returns a new model."""
    x = _check_x(model, x)
    labels = np.asarray(labels, dtype=int)
    _check_classes(labels, model.config.n_classes)
    model = model.copy()
    model.phi_z_frozen = False
    rng = np.random.default_rng(seed)
    names = ["phi_z", "head"]
    if model.config.pretrain_objective == "classifier_reconstruction":
        names.append("theta")
    states = _adam_states(model, names)
    for epoch in range(epochs):
        for idx in _batches(len(x), model.config.batch_size, rng):
            loss, grads = _pretrain_loss(model, x[idx], labels[idx], True)
            if not np.isfinite(loss):
                raise TrainingDivergedError("non-finite pretraining loss", model)
            for k in names:
                nn.adam_step(model.params[k].arrays, grads[k], states[k])
    model.phi_z_frozen = True
    return model


def train_gmvae(
    model: GmvaeModel,
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
    stopping: EarlyStopping | None = None,
    seed: int = 0,
) -> tuple[GmvaeModel, list[dict[str, Any]]]:
    """Maximize the ELBO over ``theta``, ``beta`` and ``phi_w`` with Adam.

    ``phi_z`` must already be pretrained and frozen. Stops once the
    validation negative ELBO has not improved for ``patience`` epochs and
    returns the best-validation parameters with the per-epoch log.
    """
    if not model.phi_z_frozen:
        raise ValueError("pretrain and freeze phi_z before train_gmvae")
    # fresh copy so the caller's object carries no state between runs
    stopping = replace(stopping) if stopping else EarlyStopping()
    cfg = model.config
    x_train = _check_x(model, x_train)
    x_val = _check_x(model, x_val)
    y_train = np.asarray(y_train, dtype=int)
    y_val = np.asarray(y_val, dtype=int)
    _check_classes(y_train, cfg.n_classes)
    model = model.copy()
    rng = np.random.default_rng(seed)
    # validation noise is fixed so epoch-to-epoch comparisons are not MC noise
    val_rng = np.random.default_rng([seed, 1])
    val_eps = [
        (val_rng.standard_normal((len(x_val), cfg.dim_z)), val_rng.standard_normal((len(x_val), cfg.dim_w)))
        for _ in range(cfg.mc_samples)
    ]
    names = ["theta", "beta", "phi_w"]
    states = _adam_states(model, names)
    history: list[dict[str, Any]] = []
    best = model.copy()
    for epoch in range(1, stopping.max_epochs + 1):
        acc = np.zeros(5)
        seen = 0
        try:
            for idx in _batches(len(x_train), cfg.batch_size, rng):
                step_grads = None
                for _ in range(cfg.mc_samples):
                    ez = rng.standard_normal((len(idx), cfg.dim_z))
                    ew = rng.standard_normal((len(idx), cfg.dim_w))
                    b, g = elbo_terms(model, x_train[idx], y_train[idx], ez, ew, with_grads=True)
                    acc += len(idx) / cfg.mc_samples * np.array(
                        [b.reconstruction, b.latent_covering, b.w_prior, b.v_prior, b.total]
                    )
                    if step_grads is None:
                        step_grads = g
                    else:
                        for k in names:
                            for p in g[k]:
                                step_grads[k][p] += g[k][p]
                seen += len(idx)
                for k in names:
                    grads_k = {p: v / cfg.mc_samples for p, v in step_grads[k].items()}
                    nn.adam_step(model.params[k].arrays, grads_k, states[k])
            val = np.zeros(5)
            for ez, ew in val_eps:
                b, _ = elbo_terms(model, x_val, y_val, ez, ew)
                val += [b.reconstruction, b.latent_covering, b.w_prior, b.v_prior, b.total]
            val /= len(val_eps)
        except (TrainingDivergedError, nn.NonFiniteGradientError) as exc:
            raise TrainingDivergedError(f"diverged in epoch {epoch}: {exc}", best,
                                        getattr(exc, "term", None)) from exc
        train_b = ElboBreakdown(*map(float, acc / seen))
        val_b = ElboBreakdown(*map(float, val))
        history.append({"epoch": epoch, "train": train_b.as_dict(), "validation": val_b.as_dict()})
        val_loss = -val_b.total
        log.debug("gmvae epoch %d train -elbo %.4f val -elbo %.4f", epoch, -train_b.total, val_loss)
        improved, stop = stopping.update(val_loss)
        if improved:
            best = model.copy()
        if stop:
            break
    return best, history


def embed(model: GmvaeModel, x: np.ndarray) -> np.ndarray:
    """Encoder means; no sampling."""
    return encode_z(model, x).mean


def class_centroids(model: GmvaeModel, x: np.ndarray, labels: np.ndarray, class_ids=None) -> CentroidSet:
    labels = np.asarray(labels, dtype=int)
    _check_classes(labels, model.config.n_classes)
    return compute_centroids(embed(model, x), labels, class_ids)


# -- checkpoints -----------------------------------------------------------


def model_to_doc(model: GmvaeModel) -> dict[str, Any]:
    return {
        "kind": "gmvae",
        "config": model.config.to_dict(),
        "d_in": model.d_in,
        "phi_z_frozen": model.phi_z_frozen,
        "networks": {k: nn.params_to_doc(model.specs[k], model.params[k]) for k in model.specs},
    }


def model_from_doc(doc: dict[str, Any]) -> GmvaeModel:
    if doc.get("kind") != "gmvae":
        raise ValueError("not a gmvae checkpoint")
    cfg = GmvaeConfig(**doc["config"])
    specs, params = {}, {}
    for name, net in doc["networks"].items():
        specs[name], params[name] = nn.params_from_doc(net)
    return GmvaeModel(cfg, int(doc["d_in"]), specs, params, bool(doc["phi_z_frozen"]))


def save_model(path: str | Path, model: GmvaeModel) -> None:
    Path(path).write_text(json.dumps(model_to_doc(model)))


def load_model(path: str | Path) -> GmvaeModel:
    return model_from_doc(json.loads(Path(path).read_text()))
