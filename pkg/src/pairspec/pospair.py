"""Exact positive-pair kernel of a finite task.

For a task p(z), p(a|z) the positive-pair law is
p_plus(a1, a2) = sum_z p(a1|z) p(a2|z) p(z), and the kernel is its density
ratio against the product of marginals, K(a1, a2) = p_plus / (p(a1) p(a2)).
Everything else here is a deterministic function of the joint table: the
symmetric normalization M = D^{-1/2} P D^{-1/2}, the transition kernel of
the augmentation chain, its Laplacian, and the pair discrepancy quadratic
form.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import tasklab
from .errors import ShapeError, UnreachableViewError


@dataclass(frozen=True, eq=False)
class PosPairOperator:
    """Dense positive-pair structure of an enumerated task.

    Attributes
    ----------
    p_a : (n,) marginal view distribution, all entries positive.
    joint : (n, n) symmetric positive-pair law p_plus(a1, a2).
    p_z : (m,) latent distribution.
    cond : (m, n) conditional table p(a|z).
    """

    p_a: np.ndarray
    joint: np.ndarray
    p_z: np.ndarray
    cond: np.ndarray

    @property
    def n_views(self):
        return self.p_a.shape[0]

    @cached_property
    def kernel(self):
        """Kernel matrix K(a1, a2) = p_plus(a1, a2) / (p(a1) p(a2))."""
        return self.joint / np.outer(self.p_a, self.p_a)

    @cached_property
    def sym(self):
        """Symmetric normalization M = D^{-1/2} p_plus D^{-1/2}; spectrum in [-1, 1]."""
        d = 1.0 / np.sqrt(self.p_a)
        return self.joint * np.outer(d, d)

    @cached_property
    def transition(self):
        """Column-indexed transition table: entry [a2, a1] = p_plus(a2 | a1)."""
        return self.joint / self.p_a[None, :]

    @cached_property
    def laplacian(self):
        """L = diag(p_a) - p_plus; the pair discrepancy is 2 g^T L g."""
        return np.diag(self.p_a) - self.joint

    @cached_property
    def feature_map(self):
        """Feature matrix Phi (|Z| x n) with Phi^T Phi = K.

        Column a is the posterior-tilted vector p(a|z) sqrt(p(z)) / p(a).
        """
        return (self.cond * np.sqrt(self.p_z)[:, None]) / self.p_a[None, :]


def build_exact(task):
    """Construct the dense operator for an enumerated task.

    Raises
    ------
    ShapeError
        If the task's view space is not enumerated.
    UnreachableViewError
        If any view has zero marginal probability.
    """
    if not task.enumerated:
        raise ShapeError("build_exact: requires an enumerated view space")
    p_a = tasklab.marginals(task)
    bad = np.nonzero(p_a < tasklab.MARGINAL_FLOOR)[0]
    if bad.size:
        raise UnreachableViewError(
            f"build_exact: view {int(bad[0])} has zero marginal probability"
        )
    joint = (task.cond * task.p_z[:, None]).T @ task.cond
    joint = 0.5 * (joint + joint.T)
    return PosPairOperator(
        p_a=p_a, joint=joint, p_z=task.p_z.copy(), cond=task.cond.copy()
    )


def kernel_eval(task, view1, view2):
    """Pointwise kernel value for any task, without enumerating the view space.

    K(a1, a2) = sum_z p(a1|z) p(a2|z) p(z) / (p(a1) p(a2)).

    Raises
    ------
    UnreachableViewError
        If either view has zero marginal probability.
    """
    m1 = tasklab.marginal_prob(task, view1)
    m2 = tasklab.marginal_prob(task, view2)
    if m1 < tasklab.MARGINAL_FLOOR or m2 < tasklab.MARGINAL_FLOOR:
        raise UnreachableViewError("kernel_eval: view has zero marginal probability")
    if task.enumerated:
        i, j = int(view1), int(view2)
        num = float(task.p_z @ (task.cond[:, i] * task.cond[:, j]))
    else:
        num = float(
            sum(
                task.p_z[z]
                * tasklab.cond_prob(task, z, view1)
                * tasklab.cond_prob(task, z, view2)
                for z in range(task.n_latents)
            )
        )
    return num / (m1 * m2)


def transition_row(op, view):
    """One-step law p_plus(. | view) of the augmentation chain."""
    view = int(view)
    if not 0 <= view < op.n_views:
        raise ShapeError(f"transition_row: view {view} out of range")
    return op.transition[:, view].copy()


def discrepancy(op, g):
    """Expected squared difference of g across positive pairs.

    E_{p_plus}[(g(a1) - g(a2))^2], computed exactly as 2 g^T L g.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.shape != (op.n_views,):
        raise ShapeError(
            f"discrepancy: g has shape {g.shape}, expected ({op.n_views},)"
        )
    return float(2.0 * g @ op.laplacian @ g)


def discrepancy_mc(task, fn, n_pairs, rng):
    """Monte-Carlo pair discrepancy for function callables on any task.

    Parameters
    ----------
    fn : callable
        Maps a list of views to a vector of function values.
    n_pairs : int
        Positive pairs to draw.

    Returns
    -------
    (mean, stderr)
    """
    if n_pairs < 2:
        raise ShapeError("discrepancy_mc: need at least 2 pairs")
    firsts, seconds = [], []
    for _ in range(int(n_pairs)):
        v1, v2, _ = tasklab.sample_pair(task, rng)
        firsts.append(v1)
        seconds.append(v2)
    diffs = (np.asarray(fn(firsts)) - np.asarray(fn(seconds))) ** 2
    mean = float(diffs.mean())
    stderr = float(diffs.std(ddof=1) / np.sqrt(n_pairs))
    return mean, stderr
