"""Task heads over a recurrent stack: next-token language model and
end-of-sequence sentence classifier.

Both heads share the same parameter plumbing: every trainable tensor is
registered in a frozen name -> (offset, shape) index, and gradients come
back as one flat vector in that order. Losses are summed negative
log-likelihoods in nats; the gradients they return are exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import cells
from .numerics import SeededRng, ShapeError, softmax_rows

INIT_SCALE = cells.INIT_SCALE


# ---------------------------------------------------------------------------
# flat parameter views


@dataclass(frozen=True)
class ParamIndex:
    """Frozen flattening order for a model's trainable tensors."""

    names: tuple
    offsets: tuple
    shapes: tuple
    size: int

    @classmethod
    def build(cls, tensors) -> "ParamIndex":
        names, offsets, shapes = [], [], []
        off = 0
        for name, arr in tensors:
            names.append(name)
            offsets.append(off)
            shapes.append(arr.shape)
            off += arr.size
        return cls(names=tuple(names), offsets=tuple(offsets), shapes=tuple(shapes), size=off)

    def entries(self):
        for name, off, shape in zip(self.names, self.offsets, self.shapes):
            yield name, off, shape


@dataclass
class FlatParams:
    """One ordered flattening of every trainable tensor in a model."""

    index: ParamIndex
    values: np.ndarray  # 1-D float64

    def copy(self) -> "FlatParams":
        return FlatParams(self.index, self.values.copy())


class _ParamHolder:
    """Shared tensor registry / flatten / unflatten behaviour for models."""

    def tensors(self):
        raise NotImplementedError

    @property
    def index(self) -> ParamIndex:
        if getattr(self, "_index", None) is None:
            self._index = ParamIndex.build(self.tensors())
        return self._index

    def get_flat(self) -> FlatParams:
        return FlatParams(self.index, np.concatenate([arr.ravel() for _, arr in self.tensors()]))

    def set_flat(self, flat) -> None:
        values = flat.values if isinstance(flat, FlatParams) else np.asarray(flat)
        if values.size != self.index.size:
            raise ShapeError(f"flat vector has {values.size} entries, model has {self.index.size}")
        for (name, off, shape), (_, arr) in zip(self.index.entries(), self.tensors()):
            np.copyto(arr, values[off : off + arr.size].reshape(shape))

    def _flatten_grads(self, grad_tensors) -> FlatParams:
        return FlatParams(self.index, np.concatenate([g.ravel() for g in grad_tensors]))


# ---------------------------------------------------------------------------
# dropout on the non-recurrent boundaries


@dataclass
class DropoutSpec:
    """Multiplicative 0/1 noise on the embedding output and the decoder input.

    Masks are drawn once per loss call (one per boundary) and shared across
    timesteps; training uses inverted scaling (kept units multiplied by
    1/keep_prob) so evaluation runs the weights as-is.
    """

    keep_prob: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must be in (0, 1], got {self.keep_prob}")


def _draw_masks(dropout, batch, embed_dim, out_width, rng, pinned):
    if dropout is None:
        return None
    if pinned is not None:
        return pinned
    if rng is None:
        raise ValueError("dropout requires an rng")
    return (
        rng.bernoulli_mask(batch, embed_dim, dropout.keep_prob),
        rng.bernoulli_mask(batch, out_width, dropout.keep_prob),
    )


# ---------------------------------------------------------------------------
# language model


@dataclass
class LmLossResult:
    nll_sum: float
    token_count: int
    grads: FlatParams
    final_state: cells.StepState
    probs: np.ndarray  # (batch, T, vocab), rows sum to 1
    dropout_masks: Optional[tuple] = None


class LanguageModel(_ParamHolder):
    """Embedding -> recurrent stack -> softmax over the vocabulary at every step."""

    def __init__(self, embedding: np.ndarray, stack: cells.RnnStack, V: np.ndarray, b_dec: np.ndarray):
        if V.shape[0] != embedding.shape[0]:
            raise ShapeError("decoder rows must equal vocabulary size")
        if V.shape[1] != stack.output_size:
            raise ShapeError("decoder width must equal stack output size")
        self.embedding = embedding
        self.stack = stack
        self.V = V
        self.b_dec = b_dec
        self._index = None

    @classmethod
    def build(
        cls,
        vocab_size: int,
        cell_type: str,
        hidden_size: int,
        num_layers: int,
        rng: SeededRng,
        embed_dim: Optional[int] = None,
        bidirectional: bool = False,
    ) -> "LanguageModel":
        embed_dim = hidden_size if embed_dim is None else embed_dim
        embedding = rng.uniform_range(vocab_size, embed_dim, -INIT_SCALE, INIT_SCALE)
        stack = cells.build_stack(cell_type, embed_dim, hidden_size, num_layers, bidirectional, rng)
        V = rng.uniform_range(vocab_size, stack.output_size, -INIT_SCALE, INIT_SCALE)
        return cls(embedding, stack, V, np.zeros(vocab_size))

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.embedding.shape[1]

    def tensors(self):
        out = [("embedding", self.embedding)]
        out += [(f"stack.{n}", a) for n, a in self.stack.tensors()]
        out += [("decoder.V", self.V), ("decoder.b", self.b_dec)]
        return out

    def _embed(self, ids: np.ndarray):
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ValueError(f"token id out of range [0, {self.vocab_size})")
        return self.embedding[ids]  # (..., embed_dim)

    def predict_probs(self, inputs: np.ndarray, init: Optional[cells.StepState] = None):
        """Forward-only next-token distributions; returns ((B, T, vocab), final_state)."""
        inputs = np.atleast_2d(np.asarray(inputs))
        B, T = inputs.shape
        xs = [self._embed(inputs[:, t]) for t in range(T)]
        outputs, final, _ = cells.forward_sequence(self.stack, xs, init)
        logits = np.concatenate(outputs, axis=0) @ self.V.T + self.b_dec  # (T*B, vocab)
        probs = softmax_rows(logits).reshape(T, B, -1).transpose(1, 0, 2)
        return probs, final


def lm_loss_and_grad(
    model: LanguageModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    init: Optional[cells.StepState] = None,
    dropout: Optional[DropoutSpec] = None,
    rng: Optional[SeededRng] = None,
    dropout_masks: Optional[tuple] = None,
) -> LmLossResult:
    """Summed next-token NLL and exact gradients over a (batch, T) window.

    targets[b, t] is the token the model should predict after reading
    inputs[b, t]. State is carried in/out so successive windows can chain.
    """
    inputs = np.atleast_2d(np.asarray(inputs))
    targets = np.atleast_2d(np.asarray(targets))
    if inputs.shape != targets.shape:
        raise ShapeError(f"inputs {inputs.shape} and targets {targets.shape} differ")
    B, T = inputs.shape
    if T < 1:
        raise ShapeError("empty sequence")
    if targets.min() < 0 or targets.max() >= model.vocab_size:
        raise ValueError(f"token id out of range [0, {model.vocab_size})")

    masks = _draw_masks(dropout, B, model.embed_dim, model.stack.output_size, rng, dropout_masks)
    keep = dropout.keep_prob if dropout is not None else 1.0

    xs = [model._embed(inputs[:, t]) for t in range(T)]
    if masks is not None:
        embed_scale = masks[0] / keep
        xs = [x * embed_scale for x in xs]
    outputs, final, caches = cells.forward_sequence(model.stack, xs, init)
    if masks is not None:
        out_scale = masks[1] / keep
        outputs = [h * out_scale for h in outputs]

    H = np.concatenate(outputs, axis=0)  # (T*B, width), t-major
    logits = H @ model.V.T + model.b_dec
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    sumexp = e.sum(axis=1, keepdims=True)
    probs = e / sumexp
    flat_targets = targets.T.ravel()
    rows = np.arange(T * B)
    log_p = shifted[rows, flat_targets] - np.log(sumexp[:, 0])
    nll_sum = float(-log_p.sum())

    # decoder backward: d(nll_sum)/dlogits = probs - onehot(target)
    dlogits = probs.copy()
    dlogits[rows, flat_targets] -= 1.0
    dV = dlogits.T @ H
    db = dlogits.sum(axis=0)
    dH = dlogits @ model.V
    doutputs = [dH[t * B : (t + 1) * B] for t in range(T)]
    if masks is not None:
        doutputs = [d * out_scale for d in doutputs]

    stack_grads, dxs, _ = cells.backward_sequence(model.stack, caches, doutputs)
    if masks is not None:
        dxs = [d * embed_scale for d in dxs]

    dE = np.zeros_like(model.embedding)
    np.add.at(dE, inputs.T.ravel(), np.concatenate(dxs, axis=0))

    grad_tensors = [dE]
    for layer_grad in stack_grads:
        for cell in (layer_grad.fwd, layer_grad.bwd):
            if cell is None:
                continue
            grad_tensors += [g for _, g in cell.tensors()]
    grad_tensors += [dV, db]

    return LmLossResult(
        nll_sum=nll_sum,
        token_count=T * B,
        grads=model._flatten_grads(grad_tensors),
        final_state=final,
        probs=probs.reshape(T, B, -1).transpose(1, 0, 2),
        dropout_masks=masks,
    )


# ---------------------------------------------------------------------------
# sentence classifier


@dataclass
class ClassifierLossResult:
    nll: float
    grads: FlatParams
    class_probs: np.ndarray  # (num_classes,)
    dropout_masks: Optional[tuple] = None


class SentenceClassifier(_ParamHolder):
    """Embedding -> recurrent stack -> one softmax over classes at sequence end.

    The sentence summary is the final forward-direction state, concatenated
    with the final reversed-direction state for bidirectional stacks (each
    direction having consumed the whole sentence).
    """

    def __init__(self, embedding: np.ndarray, stack: cells.RnnStack, V: np.ndarray, b_dec: np.ndarray):
        if V.shape[1] != stack.output_size:
            raise ShapeError("decoder width must equal stack output size")
        self.embedding = embedding
        self.stack = stack
        self.V = V  # (num_classes, output_size)
        self.b_dec = b_dec
        self._index = None

    @classmethod
    def build(
        cls,
        vocab_size: int,
        num_classes: int,
        cell_type: str,
        hidden_size: int,
        num_layers: int,
        rng: SeededRng,
        embed_dim: Optional[int] = None,
        bidirectional: bool = True,
    ) -> "SentenceClassifier":
        embed_dim = hidden_size if embed_dim is None else embed_dim
        embedding = rng.uniform_range(vocab_size, embed_dim, -INIT_SCALE, INIT_SCALE)
        stack = cells.build_stack(cell_type, embed_dim, hidden_size, num_layers, bidirectional, rng)
        V = rng.uniform_range(num_classes, stack.output_size, -INIT_SCALE, INIT_SCALE)
        return cls(embedding, stack, V, np.zeros(num_classes))

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def num_classes(self) -> int:
        return self.V.shape[0]

    def tensors(self):
        out = [("embedding", self.embedding)]
        out += [(f"stack.{n}", a) for n, a in self.stack.tensors()]
        out += [("decoder.V", self.V), ("decoder.b", self.b_dec)]
        return out

    def _embed(self, ids: np.ndarray):
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            raise ValueError(f"token id out of range [0, {self.vocab_size})")
        return self.embedding[ids]

    def _summary(self, outputs):
        H = self.stack.hidden_size
        if self.stack.bidirectional:
            return np.hstack([outputs[-1][:, :H], outputs[0][:, H:]])
        return outputs[-1]

    def predict_probs(self, token_ids: np.ndarray) -> np.ndarray:
        """Class distribution for one sentence (1-D array of token ids)."""
        ids = np.asarray(token_ids).reshape(1, -1)
        xs = [self._embed(ids[:, t]) for t in range(ids.shape[1])]
        outputs, _, _ = cells.forward_sequence(self.stack, xs)
        logits = self._summary(outputs) @ self.V.T + self.b_dec
        return softmax_rows(logits)[0]


def classifier_loss_and_grad(
    model: SentenceClassifier,
    token_ids: np.ndarray,
    label: int,
    dropout: Optional[DropoutSpec] = None,
    rng: Optional[SeededRng] = None,
    dropout_masks: Optional[tuple] = None,
) -> ClassifierLossResult:
    """NLL of one labelled sentence and exact gradients."""
    ids = np.asarray(token_ids).reshape(1, -1)
    T = ids.shape[1]
    if T < 1:
        raise ShapeError("empty sequence")
    if not 0 <= label < model.num_classes:
        raise ValueError(f"label {label} out of range [0, {model.num_classes})")

    masks = _draw_masks(dropout, 1, model.embed_dim, model.stack.output_size, rng, dropout_masks)
    keep = dropout.keep_prob if dropout is not None else 1.0

    xs = [model._embed(ids[:, t]) for t in range(T)]
    if masks is not None:
        embed_scale = masks[0] / keep
        xs = [x * embed_scale for x in xs]
    outputs, _, caches = cells.forward_sequence(model.stack, xs)
    summary = model._summary(outputs)
    if masks is not None:
        out_scale = masks[1] / keep
        summary = summary * out_scale

    logits = summary @ model.V.T + model.b_dec  # (1, C)
    shifted = logits - logits.max()
    e = np.exp(shifted)
    probs = e / e.sum()
    nll = float(np.log(e.sum()) - shifted[0, label])

    dlogits = probs.copy()
    dlogits[0, label] -= 1.0
    dV = dlogits.T @ summary
    db = dlogits[0].copy()
    dsummary = dlogits @ model.V
    if masks is not None:
        dsummary = dsummary * out_scale

    H = model.stack.hidden_size
    doutputs = [np.zeros_like(o) for o in outputs]
    if model.stack.bidirectional:
        doutputs[-1][:, :H] += dsummary[:, :H]
        doutputs[0][:, H:] += dsummary[:, H:]
    else:
        doutputs[-1] += dsummary

    stack_grads, dxs, _ = cells.backward_sequence(model.stack, caches, doutputs)
    if masks is not None:
        dxs = [d * embed_scale for d in dxs]

    dE = np.zeros_like(model.embedding)
    np.add.at(dE, ids[0], np.concatenate(dxs, axis=0))

    grad_tensors = [dE]
    for layer_grad in stack_grads:
        for cell in (layer_grad.fwd, layer_grad.bwd):
            if cell is None:
                continue
            grad_tensors += [g for _, g in cell.tensors()]
    grad_tensors += [dV, db]

    return ClassifierLossResult(
        nll=nll,
        grads=model._flatten_grads(grad_tensors),
        class_probs=probs[0],
        dropout_masks=masks,
    )


# ---------------------------------------------------------------------------
# evaluation metrics and sampling


def perplexity(total_nll: float, token_count: int) -> float:
    """exp(mean NLL in nats)."""
    if token_count <= 0:
        raise ValueError("token_count must be positive")
    return float(np.exp(total_nll / token_count))


def cross_entropy_per_char(total_nll: float, char_count: int, bits: bool = False) -> float:
    """Mean NLL per character, in nats (or bits with bits=True)."""
    if char_count <= 0:
        raise ValueError("char_count must be positive")
    ce = total_nll / char_count
    return float(ce / np.log(2.0)) if bits else float(ce)


def generate(
    model: LanguageModel,
    prefix_ids,
    max_len: int,
    temperature: float,
    rng: Optional[SeededRng] = None,
) -> list:
    """Ancestral sampling continuation of prefix_ids (temperature 0 = argmax)."""
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    if temperature > 0 and rng is None:
        raise ValueError("sampling requires an rng")
    prefix = [int(t) for t in prefix_ids]
    if not prefix:
        raise ValueError("prefix must contain at least one token")
    if any(t < 0 or t >= model.vocab_size for t in prefix):
        raise ValueError("unknown prefix token id")
    state = None
    out = []
    current = np.asarray([prefix])
    for _ in range(max_len):
        probs, state = model.predict_probs(current, state)
        last = probs[0, -1]
        if temperature == 0.0:
            nxt = int(np.argmax(last))
        elif temperature != 1.0:
            logits = np.log(np.maximum(last, 1e-300)) / temperature
            nxt = rng.choice(softmax_rows(logits.reshape(1, -1))[0])
        else:
            nxt = rng.choice(last)
        out.append(nxt)
        current = np.asarray([[nxt]])
    return out
