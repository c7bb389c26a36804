# encoding: utf-8

"""Detector losses, their weighted combination, the Adam optimizer and ReLU.

Every kernel here is small enough to be checked against a hand computation
or an independently written oracle.

>>> round(bce_loss(0.5, 1), 4)
0.6931
>>> smooth_l1([0.5, 0, 0, 0], [0, 0, 0, 0])
0.125
>>> round(combine_losses((0.0593, 0.0598, 0.2015, 0.0564)).total, 4)
0.377
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from pudesk.errors import InvariantError


PROBABILITY_EPSILON = 1e-12

#: Loss term names, in the order the training dashboard lists them.
LOSS_TERMS = ('rpn_objectness', 'rpn_localisation', 'cls_classification',
              'cls_localisation')


def _clamp_probability(p, epsilon):
    p = float(p)
    if not 0.0 <= p <= 1.0 or math.isnan(p):
        raise InvariantError('probability %r outside [0, 1]' % (p,))
    return min(max(p, epsilon), 1.0 - epsilon)


def bce_loss(p, p_star, epsilon=PROBABILITY_EPSILON):
    """Binary log loss of predicted probability ``p`` against label 0/1."""
    if p_star not in (0, 1):
        raise InvariantError('objectness label must be 0 or 1, got %r'
                             % (p_star,))
    p = _clamp_probability(p, epsilon)
    return -(p_star * math.log(p) + (1 - p_star) * math.log(1.0 - p))


def bce_grad(p, p_star, epsilon=PROBABILITY_EPSILON):
    """d bce_loss / d p."""
    p = _clamp_probability(p, epsilon)
    return -p_star / p + (1 - p_star) / (1.0 - p)


def smooth_l1(t, t_star):
    """Sum over coordinates of 0.5 d^2 for |d| < 1, else |d| - 0.5."""
    d = np.asarray(t, dtype=float) - np.asarray(t_star, dtype=float)
    if not np.all(np.isfinite(d)):
        raise InvariantError('smooth L1 needs finite inputs')
    a = np.abs(d)
    return float(np.sum(np.where(a < 1.0, 0.5 * d * d, a - 0.5)))


def smooth_l1_grad(t, t_star):
    """d smooth_l1 / d t."""
    d = np.asarray(t, dtype=float) - np.asarray(t_star, dtype=float)
    return np.where(np.abs(d) < 1.0, d, np.sign(d))


def _log_softmax(logits):
    logits = np.asarray(logits, dtype=float)
    shifted = logits - logits.max()
    return shifted - math.log(np.sum(np.exp(shifted)))


def softmax_ce(logits, u):
    """Cross-entropy of class ``u`` under softmax(logits), max-stabilised.

    >>> round(softmax_ce([0.0] * 6, 2), 4)
    1.7918
    """
    logits = np.asarray(logits, dtype=float)
    if logits.ndim != 1 or len(logits) < 2:
        raise InvariantError('need at least two logits')
    if not 0 <= u < len(logits):
        raise InvariantError('class index %r out of range for %d classes'
                             % (u, len(logits)))
    return float(-_log_softmax(logits)[u])


def softmax_ce_grad(logits, u):
    """d softmax_ce / d logits: softmax minus the one-hot of ``u``."""
    grad = np.exp(_log_softmax(logits))
    grad[u] -= 1.0
    return grad


def fastrcnn_loss(logits, u, t_u, v, lam=1.0):
    """Classifier loss plus ``lam`` times box regression, the latter only for
    non-background classes (``u >= 1``)."""
    loss = softmax_ce(logits, u)
    if u >= 1:
        loss += lam * smooth_l1(t_u, v)
    return loss


@dataclass(frozen=True)
class LossBreakdown(object):
    rpn_objectness: float
    rpn_localisation: float
    cls_classification: float
    cls_localisation: float
    total: float
    weights: tuple = (1.0, 1.0, 1.0, 1.0)

    def parts(self):
        return tuple(getattr(self, name) for name in LOSS_TERMS)


def combine_losses(parts, weights=None):
    """Weighted sum of the four detector losses.

    :param parts: The four losses in :data:`LOSS_TERMS` order, or a mapping
                  keyed by term name.
    :param weights: Per-term weights, default all 1.
    """
    if isinstance(parts, dict):
        parts = [parts[name] for name in LOSS_TERMS]
    parts = tuple(float(p) for p in parts)
    weights = tuple(float(w) for w in (weights or (1.0,) * len(LOSS_TERMS)))
    if len(parts) != len(LOSS_TERMS) or len(weights) != len(LOSS_TERMS):
        raise InvariantError('expected %d loss terms and weights'
                             % len(LOSS_TERMS))
    if min(weights) < 0:
        raise InvariantError('loss weights must be non-negative: %r'
                             % (weights,))
    if min(parts) < 0:
        raise InvariantError('losses must be non-negative: %r' % (parts,))
    total = math.fsum(w * p for w, p in zip(weights, parts))
    return LossBreakdown(*parts, total=total, weights=weights)


@dataclass(frozen=True)
class AdamState(object):
    """First/second moment accumulators plus Adam hyperparameters.

    States are values: :func:`adam_step` returns a new one.
    """

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, size, **hyper):
        return cls(np.zeros(size), np.zeros(size), **hyper)


def adam_step(state, grads):
    """One Adam update.

    :returns: (new state, parameter update to add to the parameters).
    """
    g = np.asarray(grads, dtype=float)
    if g.shape != state.m.shape:
        raise InvariantError('gradient shape %r does not match state %r'
                             % (g.shape, state.m.shape))
    if not np.all(np.isfinite(g)):
        raise InvariantError('non-finite gradient')
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    update = -state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return replace(state, m=m, v=v, t=t), update


def relu(x):
    """max(0, x), elementwise for arrays.

    >>> relu(-3), relu(2.5)
    (0.0, 2.5)
    """
    if np.ndim(x):
        return np.maximum(0.0, np.asarray(x, dtype=float))
    return max(0.0, float(x))


def numeric_gradient(function, x, h=1e-6):
    """Central finite-difference gradient of a scalar function."""
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        step = np.zeros_like(x)
        step[i] = h
        grad[i] = (function(x + step) - function(x - step)) / (2.0 * h)
    return grad
