"""Recurrent cells with exact backpropagation through time.

Three cell types (vanilla tanh, LSTM, GRU) share one layout convention:
encoding weights ``W`` are (gates*hidden, input), recurrent weights ``U``
are (gates*hidden, hidden), biases ``b`` are (gates*hidden,). Step inputs
are batch-major matrices (batch, width). A stack composes layers and,
optionally, a reversed pass per layer whose hidden states are concatenated
with the forward ones.

Forward steps record every activation needed by the backward pass, so
gradients are exact (no recomputation, no truncation inside a window).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numerics import SeededRng, ShapeError, sigmoid

INIT_SCALE = 0.1  # uniform weight init range; biases start at zero


# ---------------------------------------------------------------------------
# parameter blocks


@dataclass
class LstmParams:
    """Gate blocks stacked row-wise in the order input|forget|output|candidate."""

    W: np.ndarray  # (4H, input)
    U: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)

    @property
    def hidden_size(self) -> int:
        return self.U.shape[1]

    @property
    def input_size(self) -> int:
        return self.W.shape[1]

    def _gate(self, tensor: np.ndarray, k: int) -> np.ndarray:
        h = self.hidden_size
        return tensor[k * h : (k + 1) * h]

    # per-gate views; writing through them mutates the packed block
    @property
    def W_i(self):
        return self._gate(self.W, 0)

    @property
    def W_f(self):
        return self._gate(self.W, 1)

    @property
    def W_o(self):
        return self._gate(self.W, 2)

    @property
    def W_c(self):
        return self._gate(self.W, 3)

    @property
    def U_i(self):
        return self._gate(self.U, 0)

    @property
    def U_f(self):
        return self._gate(self.U, 1)

    @property
    def U_o(self):
        return self._gate(self.U, 2)

    @property
    def U_c(self):
        return self._gate(self.U, 3)

    @property
    def b_i(self):
        return self._gate(self.b, 0)

    @property
    def b_f(self):
        return self._gate(self.b, 1)

    @property
    def b_o(self):
        return self._gate(self.b, 2)

    @property
    def b_c(self):
        return self._gate(self.b, 3)

    @classmethod
    def from_gates(cls, W_i, W_f, W_o, W_c, U_i, U_f, U_o, U_c, b_i, b_f, b_o, b_c):
        return cls(
            W=np.vstack([W_i, W_f, W_o, W_c]).astype(np.float64),
            U=np.vstack([U_i, U_f, U_o, U_c]).astype(np.float64),
            b=np.concatenate([b_i, b_f, b_o, b_c]).astype(np.float64),
        )

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int) -> "LstmParams":
        return cls(
            W=np.zeros((4 * hidden_size, input_size)),
            U=np.zeros((4 * hidden_size, hidden_size)),
            b=np.zeros(4 * hidden_size),
        )

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: SeededRng) -> "LstmParams":
        return cls(
            W=rng.uniform_range(4 * hidden_size, input_size, -INIT_SCALE, INIT_SCALE),
            U=rng.uniform_range(4 * hidden_size, hidden_size, -INIT_SCALE, INIT_SCALE),
            b=np.zeros(4 * hidden_size),
        )

    def zeros_like(self) -> "LstmParams":
        return LstmParams(np.zeros_like(self.W), np.zeros_like(self.U), np.zeros_like(self.b))

    def tensors(self):
        return [("W", self.W), ("U", self.U), ("b", self.b)]


@dataclass
class GruParams:
    """Gate blocks stacked row-wise in the order update|reset|candidate.

    Recurrence: z = sigma(W_z x + U_z h), r = sigma(W_r x + U_r h),
    g = tanh(W_c x + U_c (r*h)), h' = z*h + (1-z)*g. The update gate z
    therefore gates retention: z -> 1 keeps the previous hidden state.
    """

    W: np.ndarray  # (3H, input)
    U: np.ndarray  # (3H, H)
    b: np.ndarray  # (3H,)

    @property
    def hidden_size(self) -> int:
        return self.U.shape[1]

    @property
    def input_size(self) -> int:
        return self.W.shape[1]

    def _gate(self, tensor: np.ndarray, k: int) -> np.ndarray:
        h = self.hidden_size
        return tensor[k * h : (k + 1) * h]

    @property
    def W_z(self):
        return self._gate(self.W, 0)

    @property
    def W_r(self):
        return self._gate(self.W, 1)

    @property
    def W_c(self):
        return self._gate(self.W, 2)

    @property
    def U_z(self):
        return self._gate(self.U, 0)

    @property
    def U_r(self):
        return self._gate(self.U, 1)

    @property
    def U_c(self):
        return self._gate(self.U, 2)

    @property
    def b_z(self):
        return self._gate(self.b, 0)

    @property
    def b_r(self):
        return self._gate(self.b, 1)

    @property
    def b_c(self):
        return self._gate(self.b, 2)

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int) -> "GruParams":
        return cls(
            W=np.zeros((3 * hidden_size, input_size)),
            U=np.zeros((3 * hidden_size, hidden_size)),
            b=np.zeros(3 * hidden_size),
        )

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: SeededRng) -> "GruParams":
        return cls(
            W=rng.uniform_range(3 * hidden_size, input_size, -INIT_SCALE, INIT_SCALE),
            U=rng.uniform_range(3 * hidden_size, hidden_size, -INIT_SCALE, INIT_SCALE),
            b=np.zeros(3 * hidden_size),
        )

    def zeros_like(self) -> "GruParams":
        return GruParams(np.zeros_like(self.W), np.zeros_like(self.U), np.zeros_like(self.b))

    def tensors(self):
        return [("W", self.W), ("U", self.U), ("b", self.b)]


@dataclass
class VanillaParams:
    """Plain tanh recurrence h' = tanh(W x + U h + b)."""

    W: np.ndarray  # (H, input)
    U: np.ndarray  # (H, H)
    b: np.ndarray  # (H,)

    @property
    def hidden_size(self) -> int:
        return self.U.shape[1]

    @property
    def input_size(self) -> int:
        return self.W.shape[1]

    @classmethod
    def zeros(cls, input_size: int, hidden_size: int) -> "VanillaParams":
        return cls(np.zeros((hidden_size, input_size)), np.zeros((hidden_size, hidden_size)), np.zeros(hidden_size))

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: SeededRng) -> "VanillaParams":
        return cls(
            W=rng.uniform_range(hidden_size, input_size, -INIT_SCALE, INIT_SCALE),
            U=rng.uniform_range(hidden_size, hidden_size, -INIT_SCALE, INIT_SCALE),
            b=np.zeros(hidden_size),
        )

    def zeros_like(self) -> "VanillaParams":
        return VanillaParams(np.zeros_like(self.W), np.zeros_like(self.U), np.zeros_like(self.b))

    def tensors(self):
        return [("W", self.W), ("U", self.U), ("b", self.b)]


_PARAM_CLASSES = {"lstm": LstmParams, "gru": GruParams, "vanilla": VanillaParams}
CELL_TYPES = tuple(_PARAM_CLASSES)


# ---------------------------------------------------------------------------
# single steps


def lstm_step(p: LstmParams, x_t: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray):
    """One LSTM step; returns (h_t, c_t, cache)."""
    H = p.hidden_size
    a = x_t @ p.W.T + h_prev @ p.U.T + p.b  # (B, 4H), columns i|f|o|g
    acts = np.empty_like(a)
    acts[:, : 3 * H] = sigmoid(a[:, : 3 * H])
    acts[:, 3 * H :] = np.tanh(a[:, 3 * H :])
    i, f, o, g = acts[:, :H], acts[:, H : 2 * H], acts[:, 2 * H : 3 * H], acts[:, 3 * H :]
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (x_t, h_prev, c_prev, acts, tc)


def lstm_backward_step(p: LstmParams, cache, dh, dc, grads: LstmParams):
    """Backward through one LSTM step; accumulates into grads, returns (dx, dh_prev, dc_prev)."""
    x_t, h_prev, c_prev, acts, tc = cache
    H = p.hidden_size
    i, f, o, g = acts[:, :H], acts[:, H : 2 * H], acts[:, 2 * H : 3 * H], acts[:, 3 * H :]
    do = dh * tc
    dc_total = dc + dh * o * (1.0 - tc * tc)
    da = np.empty_like(acts)
    da[:, :H] = (dc_total * g) * i * (1.0 - i)
    da[:, H : 2 * H] = (dc_total * c_prev) * f * (1.0 - f)
    da[:, 2 * H : 3 * H] = do * o * (1.0 - o)
    da[:, 3 * H :] = (dc_total * i) * (1.0 - g * g)
    grads.W += da.T @ x_t
    grads.U += da.T @ h_prev
    grads.b += da.sum(axis=0)
    dx = da @ p.W
    dh_prev = da @ p.U
    dc_prev = dc_total * f
    return dx, dh_prev, dc_prev


def gru_step(p: GruParams, x_t: np.ndarray, h_prev: np.ndarray, c_prev=None):
    """One GRU step; returns (h_t, None, cache). c is unused, kept for a uniform API."""
    H = p.hidden_size
    ax = x_t @ p.W.T  # (B, 3H)
    azr = ax[:, : 2 * H] + h_prev @ p.U[: 2 * H].T + p.b[: 2 * H]
    zr = sigmoid(azr)
    z, r = zr[:, :H], zr[:, H:]
    rh = r * h_prev
    g = np.tanh(ax[:, 2 * H :] + rh @ p.U[2 * H :].T + p.b[2 * H :])
    h = z * h_prev + (1.0 - z) * g
    return h, None, (x_t, h_prev, zr, rh, g)


def gru_backward_step(p: GruParams, cache, dh, dc, grads: GruParams):
    x_t, h_prev, zr, rh, g = cache
    H = p.hidden_size
    z, r = zr[:, :H], zr[:, H:]
    dz = dh * (h_prev - g)
    dg = dh * (1.0 - z)
    dh_prev = dh * z
    dac = dg * (1.0 - g * g)
    drh = dac @ p.U[2 * H :]
    dr = drh * h_prev
    dh_prev = dh_prev + drh * r
    da = np.empty((x_t.shape[0], 3 * H))
    da[:, :H] = dz * z * (1.0 - z)
    da[:, H : 2 * H] = dr * r * (1.0 - r)
    da[:, 2 * H :] = dac
    grads.W += da.T @ x_t
    grads.U[: 2 * H] += da[:, : 2 * H].T @ h_prev
    grads.U[2 * H :] += dac.T @ rh
    grads.b += da.sum(axis=0)
    dx = da @ p.W
    dh_prev = dh_prev + da[:, : 2 * H] @ p.U[: 2 * H]
    return dx, dh_prev, None


def vanilla_step(p: VanillaParams, x_t: np.ndarray, h_prev: np.ndarray, c_prev=None):
    """One tanh-RNN step; returns (h_t, None, cache)."""
    h = np.tanh(x_t @ p.W.T + h_prev @ p.U.T + p.b)
    return h, None, (x_t, h_prev, h)


def vanilla_backward_step(p: VanillaParams, cache, dh, dc, grads: VanillaParams):
    x_t, h_prev, h = cache
    da = dh * (1.0 - h * h)
    grads.W += da.T @ x_t
    grads.U += da.T @ h_prev
    grads.b += da.sum(axis=0)
    return da @ p.W, da @ p.U, None


_STEP_FNS = {"lstm": lstm_step, "gru": gru_step, "vanilla": vanilla_step}
_BACKWARD_FNS = {"lstm": lstm_backward_step, "gru": gru_backward_step, "vanilla": vanilla_backward_step}


# ---------------------------------------------------------------------------
# stacks


@dataclass
class StackLayer:
    fwd: object
    bwd: Optional[object] = None  # reversed-pass cell, bidirectional stacks only


@dataclass
class RnnStack:
    """Layered recurrent cells; layer l+1 consumes layer l's (possibly concatenated) outputs."""

    cell_type: str
    hidden_size: int
    bidirectional: bool
    layers: list = field(default_factory=list)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def output_size(self) -> int:
        return self.hidden_size * (2 if self.bidirectional else 1)

    @property
    def input_size(self) -> int:
        return self.layers[0].fwd.input_size

    @property
    def uses_cell_state(self) -> bool:
        return self.cell_type == "lstm"

    def directions(self) -> int:
        return 2 if self.bidirectional else 1

    def tensors(self):
        """Ordered (name, array) pairs over every trainable tensor."""
        out = []
        for li, layer in enumerate(self.layers):
            for dname, cell in (("fwd", layer.fwd), ("bwd", layer.bwd)):
                if cell is None:
                    continue
                for tname, arr in cell.tensors():
                    out.append((f"layer{li}.{dname}.{tname}", arr))
        return out


def build_stack(
    cell_type: str,
    input_size: int,
    hidden_size: int,
    num_layers: int,
    bidirectional: bool,
    rng: SeededRng,
) -> RnnStack:
    """Seeded stack; weights uniform in [-0.1, 0.1], biases zero."""
    if cell_type not in _PARAM_CLASSES:
        raise ValueError(f"unknown cell type {cell_type!r}; expected one of {CELL_TYPES}")
    if num_layers < 1:
        raise ValueError("stacks need at least one layer")
    cls = _PARAM_CLASSES[cell_type]
    layers = []
    width = input_size
    for _ in range(num_layers):
        fwd = cls.init(width, hidden_size, rng)
        bwd = cls.init(width, hidden_size, rng) if bidirectional else None
        layers.append(StackLayer(fwd=fwd, bwd=bwd))
        width = hidden_size * (2 if bidirectional else 1)
    return RnnStack(cell_type=cell_type, hidden_size=hidden_size, bidirectional=bidirectional, layers=layers)


@dataclass
class StepState:
    """Per-layer, per-direction hidden (and LSTM cell) state; index [layer][direction]."""

    h: list
    c: list  # entries None for cells without a memory cell

    def copy(self) -> "StepState":
        return StepState(
            h=[[x.copy() for x in row] for row in self.h],
            c=[[None if x is None else x.copy() for x in row] for row in self.c],
        )


def zero_state(stack: RnnStack, batch: int) -> StepState:
    dirs = stack.directions()
    h = [[np.zeros((batch, stack.hidden_size)) for _ in range(dirs)] for _ in range(stack.num_layers)]
    if stack.uses_cell_state:
        c = [[np.zeros((batch, stack.hidden_size)) for _ in range(dirs)] for _ in range(stack.num_layers)]
    else:
        c = [[None] * dirs for _ in range(stack.num_layers)]
    return StepState(h=h, c=c)


def _run_direction(cell_type, params, xs, h0, c0, reverse):
    step = _STEP_FNS[cell_type]
    T = len(xs)
    hs = [None] * T
    caches = [None] * T
    h, c = h0, c0
    order = range(T - 1, -1, -1) if reverse else range(T)
    for t in order:
        h, c, cache = step(params, xs[t], h, c)
        hs[t] = h
        caches[t] = cache
    return hs, (h, c), caches


def forward_sequence(stack: RnnStack, inputs, init: Optional[StepState] = None):
    """Unroll the stack over inputs (T entries of (batch, width)).

    Returns (outputs, final_state, caches): outputs is a list of T
    (batch, output_size) matrices from the top layer; final_state holds
    each direction's state after consuming the whole sequence.
    """
    T = len(inputs)
    if T < 1:
        raise ShapeError("forward_sequence needs at least one timestep")
    batch = inputs[0].shape[0]
    if init is None:
        init = zero_state(stack, batch)
    xs = list(inputs)
    all_caches = []
    final = StepState(
        h=[[None] * stack.directions() for _ in range(stack.num_layers)],
        c=[[None] * stack.directions() for _ in range(stack.num_layers)],
    )
    for li, layer in enumerate(stack.layers):
        hs_f, (hf, cf), caches_f = _run_direction(
            stack.cell_type, layer.fwd, xs, init.h[li][0], init.c[li][0], reverse=False
        )
        final.h[li][0], final.c[li][0] = hf, cf
        if stack.bidirectional:
            hs_b, (hb, cb), caches_b = _run_direction(
                stack.cell_type, layer.bwd, xs, init.h[li][1], init.c[li][1], reverse=True
            )
            final.h[li][1], final.c[li][1] = hb, cb
            xs = [np.hstack([hs_f[t], hs_b[t]]) for t in range(T)]
            all_caches.append((caches_f, caches_b))
        else:
            xs = hs_f
            all_caches.append((caches_f, None))
    return xs, final, all_caches


def _backward_direction(cell_type, params, caches, dhs, reverse):
    backward = _BACKWARD_FNS[cell_type]
    grads = params.zeros_like()
    T = len(caches)
    batch, hidden = dhs[0].shape[0], params.hidden_size
    dh_carry = np.zeros((batch, hidden))
    dc_carry = np.zeros((batch, hidden)) if cell_type == "lstm" else None
    dxs = [None] * T
    order = range(T) if reverse else range(T - 1, -1, -1)
    for t in order:
        dh = dhs[t] + dh_carry
        dx, dh_carry, dc_carry = backward(params, caches[t], dh, dc_carry, grads)
        dxs[t] = dx
    return grads, dxs, (dh_carry, dc_carry)


def backward_sequence(stack: RnnStack, caches, output_grads):
    """Exact gradients from top-layer output grads (T entries of (batch, output_size)).

    Returns (param_grads, input_grads, init_grads): param_grads mirrors the
    stack's layer list, input_grads is per-timestep, init_grads is a
    StepState-shaped gradient of the initial state.
    """
    if len(caches) != stack.num_layers:
        raise ShapeError("caches do not match stack depth")
    T = len(output_grads)
    H = stack.hidden_size
    dxs = list(output_grads)
    param_grads = [None] * stack.num_layers
    init_grads = StepState(
        h=[[None] * stack.directions() for _ in range(stack.num_layers)],
        c=[[None] * stack.directions() for _ in range(stack.num_layers)],
    )
    for li in range(stack.num_layers - 1, -1, -1):
        layer = stack.layers[li]
        caches_f, caches_b = caches[li]
        if stack.bidirectional:
            dh_f = [d[:, :H] for d in dxs]
            dh_b = [d[:, H:] for d in dxs]
            gf, dx_f, (dh0_f, dc0_f) = _backward_direction(stack.cell_type, layer.fwd, caches_f, dh_f, reverse=False)
            gb, dx_b, (dh0_b, dc0_b) = _backward_direction(stack.cell_type, layer.bwd, caches_b, dh_b, reverse=True)
            param_grads[li] = StackLayer(fwd=gf, bwd=gb)
            dxs = [dx_f[t] + dx_b[t] for t in range(T)]
            init_grads.h[li] = [dh0_f, dh0_b]
            init_grads.c[li] = [dc0_f, dc0_b]
        else:
            gf, dx_f, (dh0_f, dc0_f) = _backward_direction(stack.cell_type, layer.fwd, caches_f, dxs, reverse=False)
            param_grads[li] = StackLayer(fwd=gf, bwd=None)
            dxs = dx_f
            init_grads.h[li] = [dh0_f]
            init_grads.c[li] = [dc0_f]
    return param_grads, dxs, init_grads
