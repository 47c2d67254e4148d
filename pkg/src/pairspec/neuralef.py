"""Streaming eigenfunction recovery without matrix assembly.

Trains a J-output network so that its outputs converge to the leading
eigenfunctions of the positive-pair operator, using only sampled pairs.
The objective rewards each output's mixture second moment while an
asymmetric stop-gradient penalty forces output ``j`` to stay orthogonal
to all lower-indexed outputs, which breaks the rotation invariance that
plain trace maximization leaves behind and pins individual
eigenfunctions in order.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import contrastive as ct
from . import numkit, tasklab
from .errors import ShapeError, TrainingError

EMA_DECAY = 0.99
CONDITIONING_FLOOR = 1e-6


def _cols(f, i):
    return ad.narrow_cols(f, i, i + 1)


def _mean_prod(a, b):
    n = a.value.shape[0]
    return ad.tsum(a * b) * (1.0 / n)


def _moment_entry(c1i, c2i, c1k, c2k, w):
    """One entry of the mixture second-moment matrix from column tensors.

    ``w`` weights the symmetrized cross-pair term E[f_i(a1) f_k(a2)];
    the remainder is the marginal term E[f_i(a) f_k(a)], estimated on
    both batch halves (each half is marginally p(a)).
    """
    pair = (_mean_prod(c1i, c2k) + _mean_prod(c1k, c2i)) * 0.5
    marg = (_mean_prod(c1i, c1k) + _mean_prod(c2i, c2k)) * 0.5
    return pair * w + marg * (1.0 - w)


def mixture_moments(f1, f2, w=0.5):
    """Mixture second-moment matrix of paired function batches.

    Parameters
    ----------
    f1, f2 : ndarray
        Shape (n, J) evaluations on the two halves of a positive-pair
        batch.
    w : float
        Weight on the cross-pair term. ``w=0.5`` gives the half/half
        mixture whose diagonal maps affinely to operator eigenvalues;
        ``w=1`` keeps only the pair term.

    Returns
    -------
    ndarray
        Shape (J, J), symmetric.
    """
    if not 0.0 <= w <= 1.0:
        raise ShapeError(f"mixture weight must lie in [0, 1], got {w}")
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    if f1.shape != f2.shape or f1.ndim != 2:
        raise ShapeError("paired batches must share an (n, J) shape")
    n = f1.shape[0]
    cross = f1.T @ f2 / n
    pair = 0.5 * (cross + cross.T)
    marg = 0.5 * (f1.T @ f1 + f2.T @ f2) / n
    return w * pair + (1.0 - w) * marg


def nef_loss(f1, f2, w=0.5):
    """Ordered eigenfunction objective on one batch.

    Maximizes the diagonal of the mixture moment matrix R while
    penalizing squared off-diagonal entries R_ik (i < k) scaled by
    1/R_ii. The anchor output i enters each penalty term through a
    stop-gradient, so gradients flow only into the later output k and
    earlier outputs are never disturbed by the ones below them.

    Parameters
    ----------
    f1, f2 : Tensor
        Shape (n, J) paired batches.

    Returns
    -------
    loss : Tensor
        Scalar, ``-sum_i R_ii + sum_{i<k} R_ik^2 / sg(R_ii)``.
    moments : ndarray
        The (J, J) mixture moment matrix, for diagnostics.
    """
    r_value = mixture_moments(f1.value, f2.value, w=w)
    j = r_value.shape[0]
    c1 = [_cols(f1, i) for i in range(j)]
    c2 = [_cols(f2, i) for i in range(j)]
    sg1 = [ad.stop_grad(c) for c in c1]
    sg2 = [ad.stop_grad(c) for c in c2]
    loss = None
    for i in range(j):
        term = _moment_entry(c1[i], c2[i], c1[i], c2[i], w) * (-1.0)
        loss = term if loss is None else loss + term
        denom = max(float(r_value[i, i]), CONDITIONING_FLOOR)
        for k in range(i + 1, j):
            r_ik = _moment_entry(sg1[i], sg2[i], c1[k], c2[k], w)
            loss = loss + ad.square(r_ik) * (1.0 / denom)
    return loss, r_value


@dataclass
class NefConfig:
    n_outputs: int = 3
    hidden: tuple = (32, 32)
    steps: int = 1500
    batch: int = 512
    lr: float = 3e-3
    seed: int = 0
    mixture_weight: float = 0.5


@dataclass
class NefResult:
    encoder: object
    ema_diag: np.ndarray
    eigenvalue_estimates: np.ndarray
    curve: list = field(default_factory=list)
    conditioning_warnings: int = 0

    def functions(self, features):
        """Outputs on the given feature rows, in the normalized scale."""
        raw = self.encoder.forward(np.asarray(features, dtype=np.float64)).value
        return raw / np.maximum(np.sqrt(self.ema_diag), 1e-12)[None, :]


def _batch_features(task, rng, batch):
    firsts, seconds = [], []
    for _ in range(batch):
        v1, v2, _ = tasklab.sample_pair(task, rng)
        firsts.append(v1)
        seconds.append(v2)
    return (
        tasklab.view_features(task, firsts),
        tasklab.view_features(task, seconds),
    )


def _normalize_batch(raw1, raw2):
    """Rescale outputs to unit marginal second moment within the batch.

    Keeps the objective in the normalized regime where the diagonal of
    the mixture matrix reads ``(1 + lambda_i) / 2`` regardless of how
    the raw network scales its outputs.
    """
    sq = (ad.tmean(ad.square(raw1), axis=0) +
          ad.tmean(ad.square(raw2), axis=0)) * 0.5
    inv = ad.power(sq + 1e-12, -0.5)
    return raw1 * inv, raw2 * inv, sq


def nef_train(task, config=None):
    """Fit eigenfunctions of a task's pair operator from samples.

    Returns a NefResult whose ``eigenvalue_estimates[i] = 2 R_ii - 1``
    uses the EMA-smoothed diagonal of the mixture moment matrix; with
    ``mixture_weight=0.5`` and normalized outputs this is a consistent
    estimate of the i-th operator eigenvalue.
    """
    config = config or NefConfig()
    if config.n_outputs < 1:
        raise ShapeError("need at least one output")
    rng = numkit.rng_stream(config.seed, "neuralef")
    feat_dim = tasklab.feature_dim(task)
    encoder = ct.Mlp([feat_dim, *config.hidden, config.n_outputs], rng)
    opt = ad.Adam(encoder.params(), lr=config.lr, total_steps=config.steps)
    ema = np.full(config.n_outputs, 0.5)
    warnings = 0
    curve = []
    for step in range(config.steps):
        x1, x2 = _batch_features(task, rng, config.batch)
        raw1 = encoder.forward(ad.constant(x1))
        raw2 = encoder.forward(ad.constant(x2))
        f1, f2, sq = _normalize_batch(raw1, raw2)
        if float(sq.value.min()) < CONDITIONING_FLOOR:
            warnings += 1
        loss, r_value = nef_loss(f1, f2, w=config.mixture_weight)
        if not np.isfinite(float(loss.value)):
            raise TrainingError(f"non-finite objective at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        ema = EMA_DECAY * ema + (1.0 - EMA_DECAY) * np.diag(r_value)
        curve.append((step, float(loss.value)))
    # Freeze the normalization: estimate raw marginal second moments on a
    # large fresh batch so functions() returns unit-moment outputs.
    x1, x2 = _batch_features(task, rng, max(config.batch, 2048))
    raw1 = encoder.forward(ad.constant(x1)).value
    raw2 = encoder.forward(ad.constant(x2)).value
    raw_sq = 0.5 * ((raw1**2).mean(axis=0) + (raw2**2).mean(axis=0))
    return NefResult(
        encoder=encoder,
        ema_diag=raw_sq,
        eigenvalue_estimates=2.0 * ema - 1.0,
        curve=curve,
        conditioning_warnings=warnings,
    )
