"""The four model variants and their forward/backward passes.

Variants:
  dg  community LSTM -> second LSTM -> per-step dense node -> mean pool ->
      sigmoid (discriminative); final cell state of the community LSTM ->
      non-negative dense layer -> next-step prediction (generative).
  h   like dg but the generative layer reads the final hidden state.
  d   discriminative path only (no generative layer, loss = L_D).
  s   single community LSTM straight into the per-step dense node.

Joint loss for dg/h: L = L_G + lambda * L_D with L_G the per-entry mean
squared error of the next-step prediction and L_D binary cross-entropy.
Dropout sites (training only): before the shared dense node, before mean
pooling, and before the generative dense layer; one shared rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, StructuralError
from .lstm import (LstmTrace, LstmWeights, dropout_mask, lstm_backward,
                   lstm_forward, sigmoid)
from .numeric import ParamSet, seeded_rng

VARIANTS = ("dg", "h", "d", "s")

LSTM_FIELDS = ("W_i", "W_f", "W_o", "W_c", "U_i", "U_f", "U_o", "U_c",
               "b_i", "b_f", "b_o", "b_c")

YHAT_CLIP = 1e-7  # cross-entropy guard; keeps log() finite at saturation


@dataclass
class ModelParams:
    """Named parameter set for one variant, plus its dimensions."""

    variant: str
    r: int
    k1: int
    k2: int | None
    t: int
    dropout: float
    params: ParamSet

    @property
    def has_lstm2(self) -> bool:
        return self.variant in ("dg", "h", "d")

    @property
    def has_generative(self) -> bool:
        return self.variant in ("dg", "h")

    def lstm_weights(self, which: str) -> LstmWeights:
        """Zero-copy LstmWeights view over this model's ParamSet ('lstm1'/'lstm2')."""
        if which == "lstm2" and not self.has_lstm2:
            raise ConfigError(f"variant '{self.variant}' has no second LSTM")
        kw = {f: self.params[f"{which}.{f}"] for f in LSTM_FIELDS}
        return LstmWeights(nonneg_inputs=(which == "lstm1"), **kw)

    def n_parameters(self) -> int:
        return self.params.n_entries()


def glorot(rng: np.random.Generator, shape: tuple[int, int],
           dtype=np.float64) -> np.ndarray:
    fan_out, fan_in = shape
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def build_model(variant: str, r: int, k1: int, k2: int | None = None,
                t: int = 30, dropout: float = 0.5, seed: int = 0,
                dtype=np.float64) -> ModelParams:
    """Initialize a model. Input/dense weights are Glorot-uniform (absolute
    value where non-negativity is required), recurrent weights Glorot,
    biases zero except the forget-gate bias (1.0)."""
    variant = variant.lower()
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant '{variant}' (use one of {VARIANTS})")
    if r < 1 or k1 < 1 or t < 1:
        raise ConfigError(f"invalid dims r={r}, k1={k1}, t={t}")
    if not 0.0 <= dropout < 1.0:
        raise ConfigError(f"dropout rate {dropout} outside [0, 1)")
    needs_k2 = variant in ("dg", "h", "d")
    if needs_k2:
        if k2 is None or k2 < 1:
            raise ConfigError(f"variant '{variant}' needs k2 >= 1")
    else:
        k2 = None

    rng = seeded_rng(seed)
    ps = ParamSet()

    def add_lstm(prefix: str, n_in: int, n_nodes: int, nonneg: bool) -> None:
        for gate in ("i", "f", "o", "c"):
            w = glorot(rng, (n_nodes, n_in), dtype)
            if nonneg:
                w = np.abs(w)
            ps.add(f"{prefix}.W_{gate}", w, nonneg=nonneg)
        for gate in ("i", "f", "o", "c"):
            ps.add(f"{prefix}.U_{gate}", glorot(rng, (n_nodes, n_nodes), dtype))
        for gate in ("i", "f", "o", "c"):
            bias = np.full(n_nodes, 1.0 if gate == "f" else 0.0, dtype=dtype)
            ps.add(f"{prefix}.b_{gate}", bias)

    add_lstm("lstm1", r, k1, nonneg=True)
    if needs_k2:
        add_lstm("lstm2", k1, k2, nonneg=False)
        dense_in = k2
    else:
        dense_in = k1
    ps.add("dense.w", glorot(rng, (1, dense_in), dtype)[0])
    ps.add("dense.b", np.zeros((), dtype=dtype))
    if variant in ("dg", "h"):
        ps.add("gen.W_d", np.abs(glorot(rng, (r, k1), dtype)), nonneg=True)
        ps.add("gen.b_d", np.zeros(r, dtype=dtype))

    return ModelParams(variant=variant, r=r, k1=k1, k2=k2, t=t,
                       dropout=dropout, params=ps)


@dataclass
class JointLossValue:
    total: float
    l_gen: float
    l_disc: float
    lam: float


def joint_loss(y, yhat, x_next=None, xhat_next=None, lam: float = 0.1) -> JointLossValue:
    """Batch-mean loss. With a generative prediction: total = L_G + lam*L_D;
    without one (discriminative-only variants): total = L_D, L_G reported 0."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    yhat = np.atleast_1d(np.asarray(yhat, dtype=float))
    if y.shape != yhat.shape:
        raise StructuralError(f"label shape {y.shape} != prediction shape {yhat.shape}")
    yc = np.clip(yhat, YHAT_CLIP, 1.0 - YHAT_CLIP)
    l_disc = float(np.mean(-(y * np.log(yc) + (1.0 - y) * np.log(1.0 - yc))))
    if xhat_next is None:
        return JointLossValue(total=l_disc, l_gen=0.0, l_disc=l_disc, lam=lam)
    x_next = np.atleast_2d(np.asarray(x_next, dtype=float))
    xhat_next = np.atleast_2d(np.asarray(xhat_next, dtype=float))
    if x_next.shape != xhat_next.shape:
        raise StructuralError(
            f"target shape {x_next.shape} != prediction shape {xhat_next.shape}")
    l_gen = float(np.mean((x_next - xhat_next) ** 2))
    return JointLossValue(total=l_gen + lam * l_disc, l_gen=l_gen,
                          l_disc=l_disc, lam=lam)


def _as_batch(model: ModelParams, X) -> tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=float)
    squeezed = X.ndim == 2
    if squeezed:
        X = X[None]
    if X.ndim != 3 or X.shape[2] != model.r:
        raise StructuralError(
            f"expected (T, {model.r}) or (B, T, {model.r}) input, got {X.shape}")
    return X, squeezed


class _ForwardCache:
    """Everything the joint backward pass needs, masks included."""

    def __init__(self):
        self.trace1: LstmTrace | None = None
        self.trace2: LstmTrace | None = None
        self.mask_dense = None
        self.mask_pool = None
        self.mask_gen = None
        self.dropped_h = None
        self.z_dropped = None
        self.ybar = None
        self.yhat = None
        self.gen_state = None
        self.gen_dropped = None
        self.xhat = None


def _forward(model: ModelParams, X: np.ndarray, training: bool,
             rng: np.random.Generator | None,
             want_generative: bool) -> _ForwardCache:
    """Shared forward pass. Mask draw order is fixed (dense, pool, gen) so a
    seeded rng reproduces identical stochastic passes."""
    B, T, _ = X.shape
    cache = _ForwardCache()
    cache.trace1 = lstm_forward(X, model.lstm_weights("lstm1"))
    if model.has_lstm2:
        cache.trace2 = lstm_forward(cache.trace1.H, model.lstm_weights("lstm2"))
        h_for_dense = cache.trace2.H
    else:
        h_for_dense = cache.trace1.H

    rate = model.dropout if training else 0.0
    if rate > 0.0 and rng is None:
        raise ConfigError("training-mode forward with dropout needs an rng")
    dt = X.dtype
    one = np.ones((), dtype=dt)
    cache.mask_dense = dropout_mask(h_for_dense.shape, rate, rng, dt) if rate else one
    cache.mask_pool = dropout_mask((B, T), rate, rng, dt) if rate else one
    if model.has_generative:
        cache.mask_gen = (dropout_mask((B, model.k1), rate, rng, dt)
                          if rate else one)

    cache.dropped_h = h_for_dense * cache.mask_dense
    z = cache.dropped_h @ model.params["dense.w"] + model.params["dense.b"]
    cache.z_dropped = z * cache.mask_pool
    cache.ybar = cache.z_dropped.mean(axis=1)
    cache.yhat = sigmoid(cache.ybar)

    if want_generative:
        if not model.has_generative:
            raise ConfigError(
                f"variant '{model.variant}' has no generative path")
        final = cache.trace1.C[:, -1] if model.variant == "dg" else cache.trace1.H[:, -1]
        cache.gen_state = final
        cache.gen_dropped = final * cache.mask_gen
        cache.xhat = cache.gen_dropped @ model.params["gen.W_d"].T + model.params["gen.b_d"]
    return cache


def forward_discriminative(model: ModelParams, X, training: bool = False,
                           rng: np.random.Generator | None = None) -> np.ndarray:
    """Class probability yhat in (0, 1); scalar for a (T, R) input, else (B,)."""
    Xb, squeezed = _as_batch(model, X)
    cache = _forward(model, Xb, training, rng, want_generative=False)
    return cache.yhat[0] if squeezed else cache.yhat


def forward_generative(model: ModelParams, X, training: bool = False,
                       rng: np.random.Generator | None = None) -> np.ndarray:
    """Linear next-step prediction; (R,) for a (T, R) input, else (B, R)."""
    Xb, squeezed = _as_batch(model, X)
    cache = _forward(model, Xb, training, rng, want_generative=True)
    return cache.xhat[0] if squeezed else cache.xhat


def _store_lstm_grads(grads: ParamSet, prefix: str, lg) -> None:
    for f in LSTM_FIELDS:
        arr = grads[f"{prefix}.{f}"]
        arr += getattr(lg, f)


def backward_joint(model: ModelParams, X, y, x_next=None, lam: float = 0.1,
                   training: bool = False,
                   rng: np.random.Generator | None = None
                   ) -> tuple[JointLossValue, ParamSet]:
    """Loss and exact gradients of the variant's loss for one (mini-)batch.

    For dg/h, x_next is required and the shared community LSTM receives the
    sum of both paths' gradients. Dropout masks (training mode) are drawn
    once from `rng` and shared by the forward and backward passes, so equal
    seeds give exactly equal results."""
    Xb, _ = _as_batch(model, X)
    B, T, _ = Xb.shape
    y = np.broadcast_to(np.asarray(y, dtype=float), (B,))
    gen = model.has_generative
    if gen:
        if x_next is None:
            raise StructuralError(f"variant '{model.variant}' needs x_next targets")
        x_next = np.asarray(x_next, dtype=float).reshape(B, model.r)

    cache = _forward(model, Xb, training, rng, want_generative=gen)
    loss = joint_loss(y, cache.yhat,
                      x_next if gen else None,
                      cache.xhat if gen else None, lam=lam)

    grads = model.params.zeros_like()
    disc_scale = lam if gen else 1.0

    # discriminative head: d total / d ybar = scale * (yhat - y) / B
    dybar = disc_scale * (cache.yhat - y) / B
    dz = (dybar[:, None] / T) * np.broadcast_to(cache.mask_pool, (B, T))
    grads["dense.w"] += np.einsum("bt,btk->k", dz, cache.dropped_h)
    grads["dense.b"] += dz.sum()
    dh_dense = (dz[:, :, None] * model.params["dense.w"]) * cache.mask_dense

    dstate = None  # gradient reaching lstm1's final cell state (dg only)
    dH1 = None
    if model.has_lstm2:
        lg2 = lstm_backward(cache.trace2, dh_dense, None, model.lstm_weights("lstm2"))
        _store_lstm_grads(grads, "lstm2", lg2)
        dH1 = lg2.dX
    else:
        dH1 = dh_dense

    if gen:
        dxhat = (2.0 / (model.r * B)) * (cache.xhat - x_next)
        grads["gen.W_d"] += dxhat.T @ cache.gen_dropped
        grads["gen.b_d"] += dxhat.sum(axis=0)
        dgen_state = (dxhat @ model.params["gen.W_d"]) * cache.mask_gen
        if model.variant == "dg":
            dstate = dgen_state
        else:  # h: generative reads h_T, add onto the last hidden step
            dH1 = dH1.copy()
            dH1[:, -1] += dgen_state

    lg1 = lstm_backward(cache.trace1, dH1, dstate, model.lstm_weights("lstm1"))
    _store_lstm_grads(grads, "lstm1", lg1)
    return loss, grads


def community_influence(model: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Influence of each community node on classification: the sum of
    absolute second-LSTM input weights attached to it, over all four gates.

    Returns (scores, ranking) with ranking = node indices, descending."""
    if not model.has_lstm2:
        raise ConfigError(f"variant '{model.variant}' has no second LSTM")
    scores = np.zeros(model.k1)
    for gate in ("i", "f", "o", "c"):
        scores += np.abs(model.params[f"lstm2.W_{gate}"]).sum(axis=0)
    ranking = np.argsort(-scores, kind="stable")
    return scores, ranking
