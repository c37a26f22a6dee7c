"""Forward-only evaluation: point-estimate and ensemble metrics.

Ensemble metrics average per-sample probabilities. Because averaging is
linear, the ensemble probability of the realized target token is the mean
of the per-sample target probabilities, so one (samples x tokens) matrix
of target probabilities supports every subset of the bank without
re-running the models.
"""

from __future__ import annotations

import numpy as np

from . import data as data_mod
from .models import LanguageModel, SentenceClassifier


def lm_eval_batches(ids: np.ndarray, batch_size: int, unroll: int) -> list:
    """Deterministic successive batches for evaluating a stream."""
    if len(ids) < 2:
        raise ValueError("evaluation stream needs at least two tokens")
    stream = data_mod.StreamCorpus(split="eval", ids=ids)
    U = min(unroll, len(ids) - 1)
    B = max(1, min(batch_size, len(ids) // U))
    plan = data_mod.BatchPlan(mode="successive", minibatch_size=B, unroll_length=U)
    return data_mod.plan_successive(stream, plan).batches


def lm_target_probs(model: LanguageModel, batches) -> np.ndarray:
    """Probability the model assigned to each realized next token, in batch order."""
    out = []
    state = None
    for batch in batches:
        if batch.reset_state:
            state = None
        probs, state = model.predict_probs(batch.inputs, state)
        B, T = batch.inputs.shape
        rows = np.arange(B)[:, None]
        cols = np.arange(T)[None, :]
        out.append(probs[rows, cols, batch.targets].ravel())
    return np.concatenate(out)


def lm_point_metrics(model: LanguageModel, ids: np.ndarray, batch_size: int, unroll: int):
    """(nll_sum, token_count) for a single parameter setting."""
    batches = lm_eval_batches(ids, batch_size, unroll)
    p = lm_target_probs(model, batches)
    return float(-np.log(p).sum()), p.size


def lm_sample_prob_matrix(model: LanguageModel, samples, ids: np.ndarray, batch_size: int, unroll: int) -> np.ndarray:
    """(num_samples, num_tokens) target probabilities, one row per bank sample."""
    batches = lm_eval_batches(ids, batch_size, unroll)
    saved = model.get_flat()
    rows = []
    try:
        for s in samples:
            model.set_flat(s)
            rows.append(lm_target_probs(model, batches))
    finally:
        model.set_flat(saved)
    return np.stack(rows, axis=0)


def ensemble_nll_from_matrix(prob_matrix: np.ndarray) -> float:
    """NLL of the probability-averaged ensemble, from per-sample target probs."""
    return float(-np.log(prob_matrix.mean(axis=0)).sum())


def mean_sample_nll_from_matrix(prob_matrix: np.ndarray) -> float:
    """Mean over samples of the per-sample NLL."""
    return float(-np.log(prob_matrix).sum(axis=1).mean())


def classifier_prob_matrix(model: SentenceClassifier, samples, encoded_examples) -> np.ndarray:
    """(num_samples, num_sentences, num_classes) class probabilities."""
    saved = model.get_flat()
    rows = []
    try:
        for s in samples:
            model.set_flat(s)
            rows.append(np.stack([model.predict_probs(ids) for _, ids in encoded_examples]))
    finally:
        model.set_flat(saved)
    return np.stack(rows, axis=0)


def classifier_metrics(probs: np.ndarray, labels: np.ndarray):
    """(nll_sum, error_rate) of class-probability predictions vs labels."""
    n = len(labels)
    picked = probs[np.arange(n), labels]
    nll = float(-np.log(np.maximum(picked, 1e-300)).sum())
    err = float((probs.argmax(axis=1) != labels).mean())
    return nll, err


def classifier_point_metrics(model: SentenceClassifier, encoded_examples):
    """(nll_sum, count, error_rate) for a single parameter setting."""
    labels = np.asarray([lab for lab, _ in encoded_examples])
    probs = np.stack([model.predict_probs(ids) for _, ids in encoded_examples])
    nll, err = classifier_metrics(probs, labels)
    return nll, len(labels), err
