"""Closed-form machinery of the categorical diffusion process.

Labels are 1-indexed, ``1..L``. Every function broadcasts over arrays of
labels and returns probability vectors along a trailing axis of length L.
Step indices may be scalars or integer arrays broadcastable against the
label arrays.

A *hop* from step ``t`` down to step ``s < t`` generalises the single step
``t -> t-1``: the keep-probability of the hop is ``alpha_bar[t] / alpha_bar[s]``.
With ``s = t - 1`` it reduces to ``alpha[t]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise levels; arrays are indexed by step, entry 0 is the clean state."""

    beta: np.ndarray
    alpha: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 2:
            raise ValueError("schedule needs at least one step")
        if beta[0] != 0.0:
            raise ValueError("beta[0] is reserved and must be 0")
        if np.any(beta[1:] <= 0.0) or np.any(beta[1:] >= 1.0):
            raise ValueError("beta_t must lie in (0, 1)")
        alpha = 1.0 - beta
        beta.flags.writeable = False
        alpha.flags.writeable = False
        alpha_bar = np.cumprod(alpha)
        alpha_bar.flags.writeable = False
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        return cls(np.concatenate([[0.0], np.asarray(betas, dtype=np.float64)]))

    @property
    def T(self) -> int:
        return self.beta.size - 1

    def check_step(self, t, lo: int = 1) -> None:
        t = np.asarray(t)
        if np.any(t < lo) or np.any(t > self.T):
            raise ValueError(f"step {t.tolist()} outside [{lo}, {self.T}]")


def cosine_schedule(T: int, s: float = COSINE_OFFSET) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"cosine_schedule needs T >= 1, got {T}")
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos((steps / T + s) / (1.0 + s) * math.pi / 2.0) ** 2
    ab = f / f[0]
    beta = np.minimum(1.0 - ab[1:] / ab[:-1], MAX_BETA)
    return NoiseSchedule.from_betas(beta)


@dataclass(frozen=True)
class LabelMap:
    """A grid of labels in ``1..num_classes``."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError(f"label map must be 2-D, got shape {labels.shape}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if labels.size and (labels.min() < 1 or labels.max() > self.num_classes):
            raise ValueError(f"labels must lie in 1..{self.num_classes}")
        labels = labels.astype(np.int64)
        labels.flags.writeable = False
        object.__setattr__(self, "labels", labels)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def __eq__(self, other):
        return isinstance(other, LabelMap) and self.num_classes == other.num_classes \
            and np.array_equal(self.labels, other.labels)

    def __hash__(self):
        return hash((self.num_classes, self.labels.shape, self.labels.tobytes()))


def check_probmap(p: np.ndarray, atol: float = 1e-9) -> None:
    p = np.asarray(p)
    if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
        raise ValueError("probabilities must lie in [0, 1]")
    if np.max(np.abs(p.sum(axis=-1) - 1.0)) > atol:
        raise ValueError("probability rows must sum to 1")


def one_hot(labels, num_classes: int) -> np.ndarray:
    """(..., L) one-hot rows for 1-indexed labels."""
    labels = np.asarray(labels)
    return (labels[..., None] == np.arange(1, num_classes + 1)).astype(np.float64)


def _expand(t, ref: np.ndarray) -> np.ndarray:
    t = np.asarray(t)
    return t.reshape(t.shape + (1,) * (ref.ndim - t.ndim))


def _check_labels(x, L: int) -> np.ndarray:
    x = np.asarray(x)
    if np.any(x < 1) or np.any(x > L):
        raise ValueError(f"labels must lie in 1..{L}")
    return x


def hop_coefficients(schedule: NoiseSchedule, t, s=None):
    """(keep-probability of the hop s->t, alpha_bar[s], alpha_bar[t])."""
    t = np.asarray(t)
    s = t - 1 if s is None else np.asarray(s)
    if np.any(s < 0) or np.any(s >= t):
        raise ValueError("hop target must satisfy 0 <= s < t")
    ab = schedule.alpha_bar
    return ab[t] / ab[s], ab[s], ab[t]


def forward_step_params(x_prev, schedule: NoiseSchedule, t, num_classes: int) -> np.ndarray:
    schedule.check_step(t)
    x_prev = _check_labels(x_prev, num_classes)
    beta = _expand(schedule.beta[np.asarray(t)], x_prev)[..., None]
    return beta / num_classes + (1.0 - beta) * one_hot(x_prev, num_classes)


def forward_marginal_params(x0, schedule: NoiseSchedule, t, num_classes: int) -> np.ndarray:
    schedule.check_step(t, lo=0)
    x0 = _check_labels(x0, num_classes)
    ab = _expand(schedule.alpha_bar[np.asarray(t)], x0)[..., None]
    return (1.0 - ab) / num_classes + ab * one_hot(x0, num_classes)


def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one 1-indexed label per row of ``probs`` (..., L) by inverse CDF."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1])[..., None]
    idx = (u >= cdf[..., :-1]).sum(axis=-1)
    return idx + 1


def sample_xt(x0, schedule: NoiseSchedule, t, rng: np.random.Generator,
              num_classes: int | None = None):
    """Draw x_t ~ q(x_t | x_0) independently per pixel.

    Accepts a :class:`LabelMap` (returns a LabelMap) or a label array whose
    leading axes broadcast against ``t``.
    """
    if isinstance(x0, LabelMap):
        out = sample_xt(x0.labels, schedule, t, rng, x0.num_classes)
        return LabelMap(out, x0.num_classes)
    return sample_categorical(forward_marginal_params(x0, schedule, t, num_classes), rng)


def _posterior_terms(x_t, x0, schedule, t, s, L):
    a_hop, ab_s, ab_t = (_expand(v, np.asarray(x_t))[..., None]
                         for v in hop_coefficients(schedule, t, s))
    left = (1.0 - a_hop) / L + a_hop * one_hot(x_t, L)
    right = (1.0 - ab_s) / L + ab_s * one_hot(x0, L)
    numer = left * right
    delta = (np.asarray(x_t) == np.asarray(x0))[..., None]
    norm = (1.0 - ab_t) / L + ab_t * delta
    return numer, norm


def posterior_params(x_t, x0, schedule: NoiseSchedule, t, num_classes: int, s=None) -> np.ndarray:
    """Parameters of q(x_s | x_t, x_0) with s = t - 1 unless given."""
    schedule.check_step(t, lo=2 if s is None else 1)
    _check_labels(x_t, num_classes)
    _check_labels(x0, num_classes)
    numer, norm = _posterior_terms(x_t, x0, schedule, t, s, num_classes)
    total = numer.sum(axis=-1, keepdims=True)
    err = np.max(np.abs(total - norm))
    if err > 1e-12:
        raise ArithmeticError(f"posterior normaliser mismatch {err:.3e}")
    return numer / total


def posterior_matrix(x_t, schedule: NoiseSchedule, t, num_classes: int, s=None) -> np.ndarray:
    """(..., x0, x_s) array stacking posterior_params over every clean label."""
    x_t = np.asarray(x_t)
    labels = np.arange(1, num_classes + 1)
    xt_b = x_t[..., None]
    t_b = _expand(t, x_t)[..., None] if np.ndim(t) else t
    s_b = None if s is None else (_expand(s, x_t)[..., None] if np.ndim(s) else s)
    return posterior_params(np.broadcast_to(xt_b, x_t.shape + (num_classes,)),
                            np.broadcast_to(labels, x_t.shape + (num_classes,)),
                            schedule, t_b, num_classes, s=s_b)


def mix_reverse_params(p0_hat, x_t, schedule: NoiseSchedule, t, s=None) -> np.ndarray:
    """Reverse-step parameters: the p0_hat-weighted mixture of posteriors.

    ``p0_hat`` is (..., L); ``x_t`` is (...). The step t = 1 is rejected,
    the caller uses p0_hat directly there.
    """
    p0_hat = np.asarray(p0_hat, dtype=np.float64)
    if np.any(np.asarray(t) < 2) and s is None:
        raise ValueError("mix_reverse_params is undefined at t = 1; use p0_hat directly")
    L = p0_hat.shape[-1]
    if p0_hat.shape[:-1] != np.shape(x_t):
        raise ValueError(f"p0_hat {p0_hat.shape} does not match x_t {np.shape(x_t)}")
    m = posterior_matrix(x_t, schedule, t, L, s=s)
    return np.einsum("...ij,...i->...j", m, p0_hat)


def categorical_kl(q, p) -> float | np.ndarray:
    """KL(q || p) in nats along the last axis; +inf where p misses q's support."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    pos = q > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pos, q * (np.log(np.where(pos, q, 1.0)) - np.log(np.where(pos, p, 1.0))), 0.0)
        terms = np.where(pos & (p <= 0), np.inf, terms)
    out = np.maximum(terms.sum(axis=-1), 0.0)
    return float(out) if out.ndim == 0 else out


def uniform_tv(schedule: NoiseSchedule, num_classes: int) -> float:
    """Largest total variation between q(x_T | x_0) and uniform over x_0."""
    rows = forward_marginal_params(np.arange(1, num_classes + 1), schedule, schedule.T, num_classes)
    return float(0.5 * np.abs(rows - 1.0 / num_classes).sum(axis=-1).max())


def prior_kl(schedule: NoiseSchedule, num_classes: int) -> float:
    """Per-pixel KL(q(x_T | x_0) || uniform); identical for every x_0."""
    row = forward_marginal_params(1, schedule, schedule.T, num_classes)
    return categorical_kl(row, np.full(num_classes, 1.0 / num_classes))
