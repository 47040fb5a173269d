"""Similarity and contrastive objectives for both training stages.

By default the image-to-text terms divide by the sum of *paired*
similarities exp(s(V_a, T_a)) over the batch.  ``i2t_denominator="cross"``
switches to the usual exp(s(V_i, T_a)) row softmax.
"""
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import diffcore as dc

UNIT_TOL = 1e-6


class DegenerateBatchError(ValueError):
    pass


@dataclass
class LossConfig:
    temperature: float = 0.07
    i2t_denominator: str = "diagonal"

    def validate(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.i2t_denominator not in ("diagonal", "cross"):
            raise ValueError("i2t_denominator must be 'diagonal' or 'cross'")


@dataclass
class TrainBatch:
    V: dc.Tensor
    y: np.ndarray
    T_identity: dc.Tensor = None
    T_m: dc.Tensor = None
    T_p: dc.Tensor = None
    # optional (B * K, d) identity texts of each batch class in each sample's context
    T_grid: dc.Tensor = None

    @property
    def size(self):
        return len(self.y)


class Stage2Losses(NamedTuple):
    mi2t: dc.Tensor
    mt2i: dc.Tensor
    pi2t: dc.Tensor
    pt2i: dc.Tensor
    total: dc.Tensor


def _check_unit(t, what):
    norms = np.linalg.norm(t.data, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError(f"{what} must be unit-norm (got norms in [{norms.min():.6g}, {norms.max():.6g}])")


def similarity(u, v, tau=1.0):
    _check_unit(u, "u")
    _check_unit(v, "v")
    return dc.dot(u, v) / tau


def similarity_matrix(V, T, tau=1.0):
    """``[a, j] = s(V_a, T_j)``."""
    return (V @ dc.transpose(T)) / tau


def positive_set(y, i):
    y = np.asarray(y)
    return set(np.flatnonzero(y == y[i]).tolist())


def class_weights(y):
    """Weights W[p, j] so that -sum(W * logprob) is the per-class t2i average.

    For anchor text j with class c_j: positives p share c_j, each term is
    scaled by 1/|P(c_j)|, anchors of one class are averaged, then classes
    are averaged with equal weight.
    """
    y = np.asarray(y)
    classes, counts = np.unique(y, return_counts=True)
    size = dict(zip(classes.tolist(), counts.tolist()))
    n_pos = np.array([size[v] for v in y.tolist()], dtype=np.float64)
    mask = (y[:, None] == y[None, :]).astype(np.float64)
    return mask / (n_pos[None, :] ** 2 * len(classes))


def t2i_from_logits(S, y):
    """Text-to-image loss from an image x text logit matrix (columns are texts)."""
    logprob = S - dc.logsumexp(S, axis=0)
    return -dc.sum(dc.mul(logprob, dc.constant(class_weights(y))))


def diagonal_i2t_from_logits(d):
    """mean_i -log(exp(d_i) / sum_a exp(d_a)) for paired logits d."""
    return dc.logsumexp(d) - dc.mean(d)


def cross_i2t_from_logits(S):
    diag = dc.take(dc.reshape(S, (-1,)), np.arange(S.shape[0]) * (S.shape[1] + 1))
    return dc.mean(dc.logsumexp(S, axis=1) - diag)


def _paired_logits(V, T, tau):
    return dc.sum(dc.mul(V, T), axis=1) / tau


def _i2t(V, T, config):
    if config.i2t_denominator == "cross":
        return cross_i2t_from_logits(similarity_matrix(V, T, config.temperature))
    return diagonal_i2t_from_logits(_paired_logits(V, T, config.temperature))


def stage2_loss(batch, config=None):
    config = config or LossConfig()
    if batch.size < 2:
        raise DegenerateBatchError("stage-2 losses need a batch of at least 2")
    for name in ("V", "T_m", "T_p"):
        _check_unit(getattr(batch, name), name)
    tau = config.temperature
    mi2t = _i2t(batch.V, batch.T_m, config)
    mt2i = t2i_from_logits(similarity_matrix(batch.V, batch.T_m, tau), batch.y)
    pi2t = _i2t(batch.V, batch.T_p, config)
    pt2i = t2i_from_logits(similarity_matrix(batch.V, batch.T_p, tau), batch.y)
    return Stage2Losses(mi2t, mt2i, pi2t, pt2i, mi2t + mt2i + pi2t + pt2i)


def stage1_components(batch, config=None):
    """(L_i2t, L_t2i) for the identity-prompt warm-up."""
    config = config or LossConfig()
    y = np.asarray(batch.y)
    classes, first = np.unique(y, return_index=True)
    if len(classes) < 2:
        raise DegenerateBatchError("stage-1 loss needs at least two identities in the batch")
    _check_unit(batch.V, "V")
    _check_unit(batch.T_identity, "T_identity")
    tau = config.temperature
    b, k = len(y), len(classes)
    target = np.searchsorted(classes, y)
    if batch.T_grid is not None:
        _check_unit(batch.T_grid, "T_grid")
        v_rep = dc.take(batch.V, np.repeat(np.arange(b), k))
        logits = dc.reshape(_paired_logits(v_rep, batch.T_grid, tau), (b, k))
    else:
        logits = similarity_matrix(batch.V, dc.take(batch.T_identity, first), tau)
    picked = dc.take(dc.reshape(logits, (-1,)), np.arange(b) * k + target)
    i2t = dc.mean(dc.logsumexp(logits, axis=1) - picked)
    t2i = t2i_from_logits(similarity_matrix(batch.V, batch.T_identity, tau), y)
    return i2t, t2i


def stage1_loss(batch, config=None):
    i2t, t2i = stage1_components(batch, config)
    return i2t + t2i
