"""LSTM cell and unrolled layer with exact backpropagation through time.

Gate order in fused buffers is (i, f, o, g) where g is the candidate cell
update. Gate nonlinearity is the standard logistic sigmoid; candidate and
cell output use tanh. Hidden/cell shapes support a leading batch axis:
x is (R,) or (B, R), sequences are (T, R) or (B, T, R).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ConfigError, NumericError, StructuralError


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic sigmoid 1 / (1 + exp(-z))."""
    return expit(np.asarray(z, dtype=float))


@dataclass
class LstmWeights:
    """Input weights W_* (K x R), recurrent weights U_* (K x K), biases b_* (K,).

    With nonneg_inputs set, all four input-weight matrices are constrained
    to min >= 0 (enforced by the optimizer's projection, checked here)."""

    W_i: np.ndarray
    W_f: np.ndarray
    W_o: np.ndarray
    W_c: np.ndarray
    U_i: np.ndarray
    U_f: np.ndarray
    U_o: np.ndarray
    U_c: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray
    b_c: np.ndarray
    nonneg_inputs: bool = False

    @property
    def n_nodes(self) -> int:
        return self.W_i.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.W_i.shape[1]

    def validate(self) -> None:
        k, r = self.W_i.shape
        for name in ("W_i", "W_f", "W_o", "W_c"):
            w = getattr(self, name)
            if w.shape != (k, r):
                raise StructuralError(f"{name} shape {w.shape} != {(k, r)}")
            if self.nonneg_inputs and w.size and w.min() < 0:
                raise NumericError(f"{name} violates the non-negative input constraint")
        for name in ("U_i", "U_f", "U_o", "U_c"):
            u = getattr(self, name)
            if u.shape != (k, k):
                raise StructuralError(f"{name} shape {u.shape} != {(k, k)}")
        for name in ("b_i", "b_f", "b_o", "b_c"):
            b = getattr(self, name)
            if b.shape != (k,):
                raise StructuralError(f"{name} shape {b.shape} != {(k,)}")

    def fused(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(4K x R), (4K x K), (4K,) concatenations in (i, f, o, g) order."""
        W = np.concatenate([self.W_i, self.W_f, self.W_o, self.W_c], axis=0)
        U = np.concatenate([self.U_i, self.U_f, self.U_o, self.U_c], axis=0)
        b = np.concatenate([self.b_i, self.b_f, self.b_o, self.b_c])
        return W, U, b


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray


@dataclass
class LstmGrads:
    """Gradients mirroring LstmWeights, plus gradient w.r.t. the inputs."""

    W_i: np.ndarray
    W_f: np.ndarray
    W_o: np.ndarray
    W_c: np.ndarray
    U_i: np.ndarray
    U_f: np.ndarray
    U_o: np.ndarray
    U_c: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray
    b_c: np.ndarray
    dX: np.ndarray


@dataclass
class LstmTrace:
    """Forward cache: state trajectories plus gate activations per step.

    All arrays are batched (B, T, ...); `squeezed` records whether the
    caller passed an unbatched sequence."""

    X: np.ndarray
    H: np.ndarray
    C: np.ndarray
    TC: np.ndarray  # tanh(C)
    I: np.ndarray
    F: np.ndarray
    O: np.ndarray
    G: np.ndarray  # candidate cell values, tanh-activated
    h0: np.ndarray
    c0: np.ndarray
    squeezed: bool = False

    @property
    def h_seq(self) -> np.ndarray:
        return self.H[0] if self.squeezed else self.H

    @property
    def c_seq(self) -> np.ndarray:
        return self.C[0] if self.squeezed else self.C

    def final_state(self) -> LstmState:
        return LstmState(h=self.h_seq[..., -1, :], c=self.c_seq[..., -1, :])


def lstm_cell_step(x: np.ndarray, prev: LstmState, w: LstmWeights) -> LstmState:
    """One state update. x is (R,) or (B, R); prev states match."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != w.n_inputs:
        raise StructuralError(f"input size {x.shape[-1]} != {w.n_inputs}")
    if prev.h.shape[-1] != w.n_nodes or prev.c.shape[-1] != w.n_nodes:
        raise StructuralError("previous state size does not match node count")
    Wc, Uc, bc = w.fused()
    k = w.n_nodes
    pre = x @ Wc.T + prev.h @ Uc.T + bc
    i = sigmoid(pre[..., :k])
    f = sigmoid(pre[..., k:2 * k])
    o = sigmoid(pre[..., 2 * k:3 * k])
    g = np.tanh(pre[..., 3 * k:])
    c = i * g + f * prev.c
    h = o * np.tanh(c)
    if not (np.all(np.isfinite(h)) and np.all(np.isfinite(c))):
        raise NumericError("non-finite LSTM state")
    return LstmState(h=h, c=c)


def zero_state(w: LstmWeights, batch: int | None = None,
               dtype=np.float64) -> LstmState:
    shape = (w.n_nodes,) if batch is None else (batch, w.n_nodes)
    return LstmState(h=np.zeros(shape, dtype=dtype), c=np.zeros(shape, dtype=dtype))


def lstm_forward(X: np.ndarray, w: LstmWeights,
                 initial: LstmState | None = None) -> LstmTrace:
    """Unrolled forward over a (T, R) or (B, T, R) sequence.

    Returns the full h/c trajectories plus cached gate activations for
    lstm_backward. Initial state defaults to zeros."""
    X = np.asarray(X, dtype=float)
    squeezed = X.ndim == 2
    if squeezed:
        X = X[None]
    if X.ndim != 3:
        raise StructuralError(f"expected (T, R) or (B, T, R) input, got {X.shape}")
    B, T, R = X.shape
    if T < 1:
        raise StructuralError("sequence length must be >= 1")
    if R != w.n_inputs:
        raise StructuralError(f"input size {R} != {w.n_inputs}")
    k = w.n_nodes
    if initial is None:
        initial = zero_state(w, batch=B, dtype=X.dtype)
    h = np.broadcast_to(initial.h, (B, k)).astype(X.dtype)
    c = np.broadcast_to(initial.c, (B, k)).astype(X.dtype)

    Wc, Uc, bc = w.fused()
    UcT = Uc.T.copy()
    H = np.empty((B, T, k), dtype=X.dtype)
    C = np.empty((B, T, k), dtype=X.dtype)
    TC = np.empty((B, T, k), dtype=X.dtype)
    I = np.empty((B, T, k), dtype=X.dtype)
    F = np.empty((B, T, k), dtype=X.dtype)
    O = np.empty((B, T, k), dtype=X.dtype)
    G = np.empty((B, T, k), dtype=X.dtype)

    # input contribution to every step's pre-activation in one GEMM
    XW = X.reshape(B * T, R) @ Wc.T + bc
    XW = XW.reshape(B, T, 4 * k)

    for t in range(T):
        pre = XW[:, t] + h @ UcT
        i = sigmoid(pre[:, :k])
        f = sigmoid(pre[:, k:2 * k])
        o = sigmoid(pre[:, 2 * k:3 * k])
        g = np.tanh(pre[:, 3 * k:])
        c = i * g + f * c
        tc = np.tanh(c)
        h = o * tc
        I[:, t], F[:, t], O[:, t], G[:, t] = i, f, o, g
        C[:, t], TC[:, t], H[:, t] = c, tc, h

    if not (np.all(np.isfinite(H)) and np.all(np.isfinite(C))):
        raise NumericError("non-finite LSTM trajectory")
    return LstmTrace(X=X, H=H, C=C, TC=TC, I=I, F=F, O=O, G=G,
                     h0=np.broadcast_to(initial.h, (B, k)).astype(X.dtype),
                     c0=np.broadcast_to(initial.c, (B, k)).astype(X.dtype),
                     squeezed=squeezed)


def lstm_backward(trace: LstmTrace, grad_H: np.ndarray,
                  grad_c_final: np.ndarray | None,
                  w: LstmWeights) -> LstmGrads:
    """Exact BPTT given upstream sensitivities to every h_t and to c_T.

    grad_H is (T, K) or (B, T, K) matching the forward input's batching;
    grad_c_final is (K,) / (B, K) or None. Weight gradients are reduced
    over batch and time in one fixed-order contraction each."""
    grad_H = np.asarray(grad_H, dtype=trace.H.dtype)
    if trace.squeezed and grad_H.ndim == 2:
        grad_H = grad_H[None]
    if grad_H.shape != trace.H.shape:
        raise StructuralError(f"grad_H shape {grad_H.shape} != {trace.H.shape}")
    B, T, k = trace.H.shape
    if grad_c_final is None:
        dc_next = np.zeros((B, k), dtype=trace.H.dtype)
    else:
        grad_c_final = np.asarray(grad_c_final, dtype=trace.H.dtype)
        if trace.squeezed and grad_c_final.ndim == 1:
            grad_c_final = grad_c_final[None]
        if grad_c_final.shape != (B, k):
            raise StructuralError(
                f"grad_c_final shape {grad_c_final.shape} != {(B, k)}")
        dc_next = grad_c_final.copy()

    Wc, Uc, _ = w.fused()
    dPRE = np.empty((B, T, 4 * k), dtype=trace.H.dtype)
    dh_next = np.zeros((B, k), dtype=trace.H.dtype)

    # gate-derivative factors for the whole trajectory, hoisted out of the
    # sequential loop: only the dc/dh recurrences stay per-step
    i_all, f_all = trace.I, trace.F
    o_all, g_all, tc_all = trace.O, trace.G, trace.TC
    c_prev_all = np.concatenate([trace.c0[:, None, :], trace.C[:, :-1]], axis=1)
    d_tc = o_all * (1.0 - tc_all * tc_all)          # dh -> dc route
    gi = g_all * i_all * (1.0 - i_all)              # input gate factor
    cf = c_prev_all * f_all * (1.0 - f_all)         # forget gate factor
    to = tc_all * o_all * (1.0 - o_all)             # output gate factor
    ig = i_all * (1.0 - g_all * g_all)              # candidate factor

    for t in range(T - 1, -1, -1):
        dh = grad_H[:, t] + dh_next
        dc = dc_next + dh * d_tc[:, t]
        dpre = dPRE[:, t]
        dpre[:, :k] = dc * gi[:, t]
        dpre[:, k:2 * k] = dc * cf[:, t]
        dpre[:, 2 * k:3 * k] = dh * to[:, t]
        dpre[:, 3 * k:] = dc * ig[:, t]
        dc_next = dc * f_all[:, t]
        dh_next = dpre @ Uc

    flat = dPRE.reshape(B * T, 4 * k)
    R = trace.X.shape[2]
    dW = flat.T @ trace.X.reshape(B * T, R)
    h_prev_all = np.concatenate([trace.h0[:, None, :], trace.H[:, :-1]], axis=1)
    dU = flat.T @ h_prev_all.reshape(B * T, k)
    db = flat.sum(axis=0)
    dX = (flat @ Wc).reshape(B, T, R)

    if trace.squeezed:
        dX = dX[0]
    return LstmGrads(
        W_i=dW[:k], W_f=dW[k:2 * k], W_o=dW[2 * k:3 * k], W_c=dW[3 * k:],
        U_i=dU[:k], U_f=dU[k:2 * k], U_o=dU[2 * k:3 * k], U_c=dU[3 * k:],
        b_i=db[:k], b_f=db[k:2 * k], b_o=db[2 * k:3 * k], b_c=db[3 * k:],
        dX=dX)


def dropout_mask(shape, rate: float, rng: np.random.Generator,
                 dtype=np.float64) -> np.ndarray:
    """Inverted-dropout scale mask: 0 with prob `rate`, else 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate {rate} outside [0, 1)")
    if rate == 0.0:
        return np.ones(shape, dtype=dtype)
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / (1.0 - rate)


def dropout_apply(v: np.ndarray, rate: float, rng: np.random.Generator | None,
                  training: bool) -> np.ndarray:
    """Inverted dropout in training mode, identity at inference."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate {rate} outside [0, 1)")
    v = np.asarray(v)
    if not training or rate == 0.0:
        return v
    if rng is None:
        raise ConfigError("training-mode dropout needs an rng")
    return v * dropout_mask(v.shape, rate, rng, dtype=v.dtype)
