"""Parameter-update rules: plain and preconditioned stochastic gradient
descent, and their posterior-sampling counterparts with injected Gaussian
noise.

All rules act elementwise on flat parameter vectors. The gradient fed to
them is the stochastic negative log-posterior gradient assembled by
:func:`posterior_grad`: prior term plus the minibatch likelihood term
rescaled by dataset_size / minibatch_size. Updates consistently descend
(the noise-injecting rules subtract the scaled gradient too), so one sign
convention covers optimization and sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .numerics import SeededRng, ShapeError

ALGORITHMS = ("sgd", "rmsprop", "sgld", "psgld")


@dataclass
class HyperParams:
    """Step sizes, minibatch scaling, preconditioner and schedule knobs."""

    step_size: float = 1e-3
    minibatch_size: int = 1
    dataset_size: int = 1
    beta1: float = 0.99
    lam: float = 1e-8
    prior_variance: float = 1.0
    dropout_keep: float = 1.0
    burn_in_epochs: float = 0.0
    thinning_interval_epochs: float = 0.0
    clip_norm: float = 0.0  # 0 disables likelihood-gradient clipping
    decay_a: float = 0.0  # step size a*(b+t)^-gamma when a > 0, else constant
    decay_b: float = 0.0
    decay_gamma: float = 0.0
    warm_start: bool = True  # pre-accumulate v from the first minibatch (pSGLD)

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if not 0.0 < self.beta1 < 1.0:
            raise ValueError("beta1 must be in (0, 1)")
        if self.lam <= 0:
            raise ValueError("lam must be > 0")
        if self.prior_variance <= 0:
            raise ValueError("prior_variance must be > 0")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ValueError("dropout_keep must be in (0, 1]")
        if self.minibatch_size < 1 or self.dataset_size < 1:
            raise ValueError("minibatch_size and dataset_size must be >= 1")
        if self.minibatch_size > self.dataset_size:
            raise ValueError("minibatch_size cannot exceed dataset_size")
        if self.burn_in_epochs < 0 or self.thinning_interval_epochs < 0:
            raise ValueError("collection schedule values must be >= 0")

    def step_size_at(self, t: int) -> float:
        if self.decay_a > 0:
            return self.decay_a * (self.decay_b + t) ** (-self.decay_gamma)
        return self.step_size


@dataclass
class SamplerState:
    """Second-moment accumulator for the preconditioned rules."""

    v: np.ndarray
    step_counter: int = 0

    @classmethod
    def zeros(cls, size: int) -> "SamplerState":
        return cls(v=np.zeros(size), step_counter=0)

    def copy(self) -> "SamplerState":
        return SamplerState(v=self.v.copy(), step_counter=self.step_counter)


@dataclass
class GradEstimate:
    """Stochastic negative log-posterior gradient plus the minibatch it came from."""

    grad: np.ndarray
    indices: Optional[np.ndarray] = None


def posterior_grad(
    raw_loglik_grad_sum: np.ndarray,
    theta: np.ndarray,
    hp: HyperParams,
    batch_size_actual: int,
    indices=None,
) -> GradEstimate:
    """Scale a summed minibatch NLL gradient into a posterior gradient.

    grad = theta / prior_variance + (N / M) * sum_batch grad(-log p(D_i | theta)),
    where M is the actual minibatch size and N the dataset size. The prior
    term is never minibatch-scaled. Optional norm clipping applies to the
    summed likelihood term before scaling.
    """
    if batch_size_actual < 1:
        raise ValueError("batch_size_actual must be >= 1")
    if raw_loglik_grad_sum.shape != theta.shape:
        raise ShapeError("gradient and parameter vectors differ in shape")
    if not np.all(np.isfinite(raw_loglik_grad_sum)) or not np.all(np.isfinite(theta)):
        raise FloatingPointError("nonfinite values in posterior_grad inputs")
    lik = raw_loglik_grad_sum
    if hp.clip_norm > 0:
        norm = float(np.linalg.norm(lik))
        if norm > hp.clip_norm:
            lik = lik * (hp.clip_norm / norm)
    scale = hp.dataset_size / batch_size_actual
    grad = theta / hp.prior_variance + scale * lik
    return GradEstimate(grad=grad, indices=None if indices is None else np.asarray(indices))


def _grad_vec(g) -> np.ndarray:
    return g.grad if isinstance(g, GradEstimate) else np.asarray(g)


def sgd_step(theta: np.ndarray, g, eta: float) -> np.ndarray:
    """theta - eta * g."""
    return theta - eta * _grad_vec(g)


def sgld_step(theta: np.ndarray, g, eta: float, rng: Optional[SeededRng]) -> np.ndarray:
    """theta - eta * g + sqrt(2 eta) * xi, xi ~ N(0, I); rng=None disables the noise."""
    if eta <= 0:
        raise ValueError("eta must be > 0")
    grad = _grad_vec(g)
    out = theta - eta * grad
    if rng is not None:
        out = out + np.sqrt(2.0 * eta) * rng.normal(theta.size)
    return out


def rmsprop_step(theta: np.ndarray, g, state: SamplerState, hp: HyperParams):
    """Adaptive step theta - eta * g / (lam + sqrt(v')); returns (theta', state')."""
    grad = _grad_vec(g)
    if state.v.shape != grad.shape:
        raise ShapeError("sampler state does not match gradient shape")
    v = hp.beta1 * state.v + (1.0 - hp.beta1) * grad * grad
    eta = hp.step_size_at(state.step_counter)
    theta_new = theta - eta * grad / (hp.lam + np.sqrt(v))
    return theta_new, SamplerState(v=v, step_counter=state.step_counter + 1)


def psgld_step(
    theta: np.ndarray,
    g,
    state: SamplerState,
    hp: HyperParams,
    rng: Optional[SeededRng],
    identity_preconditioner: bool = False,
):
    """Preconditioned Langevin step; returns (theta', state').

    v' = beta1*v + (1-beta1)*g*g, Ginv = 1/(lam + sqrt(v')),
    theta' = theta - (eta/2)*Ginv*g + xi with xi ~ N(0, eta*Ginv) per
    coordinate. With identity_preconditioner the v update is skipped and
    Ginv is fixed at 1, which reproduces sgld_step at step size eta/2.
    rng=None disables the noise (drift only).
    """
    grad = _grad_vec(g)
    if state.v.shape != grad.shape:
        raise ShapeError("sampler state does not match gradient shape")
    eta = hp.step_size_at(state.step_counter)
    if eta <= 0:
        raise ValueError("eta must be > 0")
    if identity_preconditioner:
        v = state.v
        ginv = np.ones_like(grad)
    else:
        v = hp.beta1 * state.v + (1.0 - hp.beta1) * grad * grad
        ginv = 1.0 / (hp.lam + np.sqrt(v))
    theta_new = theta - 0.5 * eta * ginv * grad
    if rng is not None:
        theta_new = theta_new + np.sqrt(eta * ginv) * rng.normal(theta.size)
    return theta_new, SamplerState(v=v, step_counter=state.step_counter + 1)


def prewarm(state: SamplerState, g, hp: HyperParams) -> SamplerState:
    """Seed v with one accumulation of g*g before any parameter update.

    Avoids the first-step hazard where v = 0 makes the injected noise
    variance eta/lam for coordinates the preconditioner has never seen.
    """
    grad = _grad_vec(g)
    if state.v.shape != grad.shape:
        raise ShapeError("sampler state does not match gradient shape")
    v = hp.beta1 * state.v + (1.0 - hp.beta1) * grad * grad
    return SamplerState(v=v, step_counter=state.step_counter)


@dataclass
class WeightNoise:
    """Multiplicatively perturbed parameters plus the mask for the backward pass."""

    theta_noisy: np.ndarray
    multiplier: np.ndarray

    def chain_grads(self, grads_at_noisy: np.ndarray) -> np.ndarray:
        """Gradients w.r.t. the clean parameters from gradients at theta_noisy."""
        return grads_at_noisy * self.multiplier


def apply_weight_noise(theta: np.ndarray, mode: str, keep_prob: float, rng: SeededRng) -> WeightNoise:
    """Multiply theta by binary Ber(keep_prob) or Gaussian N(1, keep_prob/(1-keep_prob)) noise."""
    if mode == "dropconnect-binary":
        if not 0.0 < keep_prob <= 1.0:
            raise ValueError("binary keep_prob must be in (0, 1]")
        mult = rng.bernoulli_mask(1, theta.size, keep_prob)[0]
    elif mode == "dropconnect-gaussian":
        if not 0.0 < keep_prob < 1.0:
            raise ValueError("gaussian keep_prob must be in (0, 1)")
        std = np.sqrt(keep_prob / (1.0 - keep_prob))
        mult = rng.gaussian(1, theta.size, mean=1.0, std=std)[0]
    else:
        raise ValueError(f"unknown weight noise mode {mode!r}")
    return WeightNoise(theta_noisy=mult * theta, multiplier=mult)


def apply_update(
    algorithm: str,
    theta: np.ndarray,
    g,
    state: SamplerState,
    hp: HyperParams,
    rng: Optional[SeededRng],
):
    """Dispatch one update; returns (theta', state')."""
    if algorithm == "sgd":
        return sgd_step(theta, g, hp.step_size_at(state.step_counter)), SamplerState(
            v=state.v, step_counter=state.step_counter + 1
        )
    if algorithm == "sgld":
        out = sgld_step(theta, g, hp.step_size_at(state.step_counter), rng)
        return out, SamplerState(v=state.v, step_counter=state.step_counter + 1)
    if algorithm == "rmsprop":
        return rmsprop_step(theta, g, state, hp)
    if algorithm == "psgld":
        return psgld_step(theta, g, state, hp, rng)
    raise ValueError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")
