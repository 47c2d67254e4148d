"""Numerical verification of the spectral claims and downstream fitting.

Each check here reduces a claim about the pair operator to a finite
linear-algebra computation and reports the raw numbers, so tests and
the command line can assert the claimed identities and inequalities
directly.
"""

from dataclasses import dataclass, field

import numpy as np

from . import contrastive as ct
from . import numkit, pospair, spectra, tasklab
from .errors import ConfigError, ShapeError, SingularMatrixError

RANK_TOL = 1e-10
NULLSPACE_TOL = 1e-8


# ---------------------------------------------------------------------------
# Worst-case approximation error over invariance-constrained targets
# ---------------------------------------------------------------------------


def worst_case_error(op, functions, epsilon):
    """Exact worst-case squared approximation error of a function span.

    The adversary picks any g with pair discrepancy epsilon; the player
    answers with the best weighted-L2 approximation inside the span.

    Parameters
    ----------
    op : PosPairOperator
    functions : ndarray
        Shape (d, |A|), rows are functions on views.
    epsilon : float
        Discrepancy budget, nonnegative.

    Returns
    -------
    float
        The game value; ``inf`` when the span misses part of the
        stationary eigenspace, which the adversary can exploit without
        spending any budget.
    """
    functions = np.atleast_2d(np.asarray(functions, dtype=np.float64))
    if functions.shape[1] != op.p_a.size:
        raise ShapeError("functions must be rows over all views")
    if epsilon < 0:
        raise ShapeError("discrepancy budget must be nonnegative")
    dec = numkit.sym_eigh(op.sym)
    # Span in half-weighted coordinates, where approximation is a plain
    # orthogonal projection.
    b = functions.T * np.sqrt(op.p_a)[:, None]
    u, s, _ = np.linalg.svd(b, full_matrices=True)
    rank = int(np.sum(s > RANK_TOL * max(s[0] if s.size else 0.0, 1.0)))
    q, comp = u[:, :rank], u[:, rank:]
    # Stationary eigenspace of the chain: eigenvalue-1 eigenvectors.
    stat = dec.eigenvectors[:, dec.eigenvalues > 1.0 - spectra.EIGENSPACE_TOL]
    residual = stat - q @ (q.T @ stat)
    if stat.size and np.linalg.norm(residual) > NULLSPACE_TOL:
        return np.inf
    if comp.shape[1] == 0:
        return 0.0
    below = dec.eigenvalues <= 1.0 - spectra.EIGENSPACE_TOL
    inv_gap = np.zeros_like(dec.eigenvalues)
    inv_gap[below] = 1.0 / (1.0 - dec.eigenvalues[below])
    pinv = (dec.eigenvectors * inv_gap[None, :]) @ dec.eigenvectors.T
    restricted = comp.T @ pinv @ comp
    top = numkit.sym_eigh(0.5 * (restricted + restricted.T)).eigenvalues[0]
    return 0.5 * epsilon * float(top)


@dataclass
class MinimaxReport:
    d: int
    epsilon: float
    eigen_worst_case: float
    theoretical: float
    challenger_worst_cases: list = field(default_factory=list)

    @property
    def eigen_beats_all(self):
        finite = [c for c in self.challenger_worst_cases if np.isfinite(c)]
        if len(finite) != len(self.challenger_worst_cases):
            return False
        return all(self.eigen_worst_case <= c + 1e-8 for c in finite)


def _stationary_functions(op, basis):
    return basis.functions[basis.lambdas > 1.0 - spectra.EIGENSPACE_TOL]


def _random_span(op, basis, d, rng):
    """Random d-dim span, forced to contain the stationary eigenspace.

    Without the forcing every random challenger has an infinite worst
    case and the comparison with the eigenfunction span is vacuous.
    """
    stat = _stationary_functions(op, basis)
    if stat.shape[0] > d:
        raise ShapeError(
            f"need d >= {stat.shape[0]} to cover the stationary eigenspace"
        )
    extra = rng.normal(size=(d - stat.shape[0], op.p_a.size))
    return np.concatenate([stat, extra], axis=0) if extra.size else stat


def minimax_verify(op, d, epsilon, challengers=1000, rng=None):
    """Compare the eigenfunction span against random spans of the same size.

    The top-d eigenfunctions minimize the worst-case approximation
    error over targets with bounded pair discrepancy; the closed form
    of their own worst case is ``epsilon / (2 (1 - lambda_{d+1}))``.
    """
    if not 0 < d < op.p_a.size:
        raise ShapeError("d must satisfy 0 < d < |A|")
    rng = rng or numkit.rng_stream(0, "minimax")
    basis = spectra.exact_eigenbasis(op)
    eigen = worst_case_error(op, basis.functions[:d], epsilon)
    gap = 1.0 - basis.lambdas[d]
    theoretical = np.inf if gap <= 0 else epsilon / (2.0 * gap)
    values = [
        worst_case_error(op, _random_span(op, basis, d, rng), epsilon)
        for _ in range(challengers)
    ]
    return MinimaxReport(
        d=d,
        epsilon=float(epsilon),
        eigen_worst_case=eigen,
        theoretical=float(theoretical),
        challenger_worst_cases=values,
    )


# ---------------------------------------------------------------------------
# Maximin view-invariance of a function span
# ---------------------------------------------------------------------------


def span_max_discrepancy(op, functions):
    """Largest pair discrepancy among unit-norm elements of a span.

    Solves the generalized eigenproblem of the discrepancy quadratic
    form against the weighted Gram of the span's basis; the result does
    not depend on the choice of basis.
    """
    functions = np.atleast_2d(np.asarray(functions, dtype=np.float64))
    if functions.shape[1] != op.p_a.size:
        raise ShapeError("functions must be rows over all views")
    quad = 2.0 * functions @ op.laplacian @ functions.T
    gram = (functions * op.p_a[None, :]) @ functions.T
    white = numkit.pinv_sqrt(gram)
    pencil = white @ (0.5 * (quad + quad.T)) @ white
    return float(numkit.sym_eigh(0.5 * (pencil + pencil.T)).eigenvalues[0])


@dataclass
class InvarianceReport:
    d: int
    eigen_value: float
    theoretical: float
    challenger_values: list = field(default_factory=list)

    @property
    def eigen_beats_all(self):
        return all(self.eigen_value <= c + 1e-8 for c in self.challenger_values)


def invariance_maximin_verify(op, d, challengers=100, rng=None):
    """The top-d eigenfunction span has the most view-invariant worst element.

    Its least-invariant unit-norm element has discrepancy
    ``2 (1 - lambda_d)``; every other d-dim span does worse.
    """
    if not 0 < d <= op.p_a.size:
        raise ShapeError("d must satisfy 0 < d <= |A|")
    rng = rng or numkit.rng_stream(0, "maximin")
    basis = spectra.exact_eigenbasis(op)
    eigen = span_max_discrepancy(op, basis.functions[:d])
    values = [
        span_max_discrepancy(op, rng.normal(size=(d, op.p_a.size)))
        for _ in range(challengers)
    ]
    return InvarianceReport(
        d=d,
        eigen_value=eigen,
        theoretical=float(2.0 * (1.0 - basis.lambdas[d - 1])),
        challenger_values=values,
    )


# ---------------------------------------------------------------------------
# Discrepancy vs regression-error inequality
# ---------------------------------------------------------------------------


@dataclass
class AssumptionReport:
    max_violation: float
    trials: list = field(default_factory=list)


def assumption_bound_check(task, trials=1000, rng=None, n_labels=3):
    """Pair discrepancy never exceeds twice the best regression error.

    For each trial, draws a random function g and a random conditional
    label law p(y|z) over a finite label set, then computes both
    expectations exactly:

        E[(g(A1) - g(A2))^2]  vs  2 E[(g(A) - Y)^2].

    Returns max over trials of LHS - 2 RHS, which must be <= 0 up to
    roundoff.
    """
    rng = rng or numkit.rng_stream(0, "assumption")
    op = pospair.build_exact(task)
    cond = task.cond  # (|Z|, |A|)
    records = []
    worst = -np.inf
    for _ in range(trials):
        g = rng.normal(size=op.p_a.size)
        y_values = rng.normal(size=n_labels)
        y_cond = rng.dirichlet(np.ones(n_labels), size=task.p_z.size)
        lhs = pospair.discrepancy(op, g)
        # E[(g(A) - Y)^2] with A and Y independent given Z.
        diff_sq = (g[:, None] - y_values[None, :]) ** 2
        inner = np.einsum("za,ak,zk->z", cond, diff_sq, y_cond)
        rhs = float(np.dot(task.p_z, inner))
        violation = lhs - 2.0 * rhs
        worst = max(worst, violation)
        records.append((float(lhs), float(rhs)))
    return AssumptionReport(max_violation=float(worst), trials=records)


# ---------------------------------------------------------------------------
# Linear probes
# ---------------------------------------------------------------------------


def fit_linear(x, y, l2=0.0):
    """Ridge solution of ``min ||x b - y||^2 + l2 ||b||^2``.

    Parameters
    ----------
    x : ndarray, shape (n, d)
    y : ndarray, shape (n,) or (n, m)
    l2 : float

    Returns
    -------
    ndarray, shape (d,) or (d, m)
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise ShapeError("row counts of inputs and targets differ")
    normal = x.T @ x + l2 * np.eye(x.shape[1])
    if l2 == 0.0:
        w = np.linalg.eigvalsh(normal)
        if w.size and w[0] < RANK_TOL * max(w[-1], 1.0):
            raise SingularMatrixError(
                "normal matrix is singular; add regularization"
            )
    return np.linalg.solve(normal, x.T @ y)


@dataclass
class DownstreamReport:
    best_l2: float
    best_d: int
    val_error: float
    test_squared_error: float
    test_top1_error: float


def _centered_one_hot(labels, n_classes):
    y = np.zeros((len(labels), n_classes))
    y[np.arange(len(labels)), labels] = 1.0
    return y - 1.0 / n_classes


def downstream_eval(
    task,
    representation,
    n_train=512,
    n_val=256,
    n_test=1024,
    l2_grid=(1e-4, 1e-2, 1.0),
    d_grid=None,
    rng=None,
):
    """Linear-probe evaluation of a representation on task labels.

    Fits ridge regression from representation columns to centered
    one-hot targets, selects (l2, d) on the validation split, and
    reports test squared error plus top-1 error from argmax decoding.
    """
    if task.labels is None:
        raise ConfigError("downstream.labels", "task carries no labels")
    if min(n_train, n_val, n_test) < 1:
        raise ConfigError("downstream.splits", "every split needs samples")
    if not isinstance(task.views, tasklab.EnumeratedViews):
        raise ShapeError("downstream evaluation indexes an enumerated task")
    representation = np.atleast_2d(np.asarray(representation, dtype=np.float64))
    rng = rng or numkit.rng_stream(0, "downstream")
    n_classes = int(task.labels.max()) + 1
    d_grid = list(d_grid) if d_grid is not None else [representation.shape[1]]

    def draw(n):
        # Labels live on latents: sample the (view, latent) joint law.
        views, latents = [], []
        for _ in range(n):
            v1, _, z = tasklab.sample_pair(task, rng)
            views.append(v1)
            latents.append(z)
        idx = np.asarray(views, dtype=int)
        lab = task.labels[np.asarray(latents, dtype=int)]
        return representation[idx], _centered_one_hot(lab, n_classes), lab

    x_tr, y_tr, _ = draw(n_train)
    x_va, y_va, _ = draw(n_val)
    x_te, y_te, lab_te = draw(n_test)

    best = None
    for d in d_grid:
        if not 0 <= d <= representation.shape[1]:
            raise ConfigError("downstream.d_grid", f"d={d} out of range")
        for l2 in l2_grid:
            if d == 0:
                val = float((y_va**2).sum(axis=1).mean())
            else:
                beta = fit_linear(x_tr[:, :d], y_tr, l2=l2)
                val = float(
                    ((x_va[:, :d] @ beta - y_va) ** 2).sum(axis=1).mean()
                )
            if best is None or val < best[0]:
                best = (val, l2, d)
    val, l2, d = best
    if d == 0:
        pred = np.zeros_like(y_te)
    else:
        beta = fit_linear(x_tr[:, :d], y_tr, l2=l2)
        pred = x_te[:, :d] @ beta
    test_sq = float(((pred - y_te) ** 2).sum(axis=1).mean())
    top1 = float((pred.argmax(axis=1) != lab_te).mean())
    return DownstreamReport(
        best_l2=float(l2),
        best_d=int(d),
        val_error=val,
        test_squared_error=test_sq,
        test_top1_error=top1,
    )


# ---------------------------------------------------------------------------
# Generalization bound for constrained L1 regression on the eigenbasis
# ---------------------------------------------------------------------------


def _abs_risk_exact(op, predictions, targets, noise_half_width):
    """Exact absolute-loss risk when labels are target + uniform noise.

    E|delta - U| over U ~ Unif[-b, b] has the closed form
    (delta^2 + b^2) / (2b) inside the noise band and |delta| outside.
    """
    delta = np.abs(predictions - targets)
    b = noise_half_width
    per_view = np.where(delta <= b, (delta**2 + b**2) / (2.0 * b), delta)
    return float(np.dot(op.p_a, per_view))


def _project_ball(beta, radius):
    norm = np.linalg.norm(beta)
    return beta if norm <= radius else beta * (radius / norm)


def _erm_l1(x, y, radius, iters=2000, step_c=None):
    """Projected subgradient descent for norm-constrained L1 regression.

    Tracks the best iterate by training objective; the c/sqrt(t) step
    schedule needs no tuning beyond the single scale constant.
    """
    n, d = x.shape
    if step_c is None:
        step_c = max(radius, 0.1)
    beta = np.zeros(d)
    best_beta, best_obj = beta.copy(), np.abs(y).mean()
    for t in range(1, iters + 1):
        resid = x @ beta - y
        grad = (np.sign(resid) @ x) / n
        beta = _project_ball(beta - (step_c / np.sqrt(t)) * grad, radius)
        obj = float(np.abs(x @ beta - y).mean())
        if obj < best_obj:
            best_obj, best_beta = obj, beta.copy()
    return best_beta


@dataclass
class GenBoundReport:
    d: int
    radius: float
    n: int
    epsilon: float
    best_coeff_norm: float
    bound_rhs: float
    excess_risks: list = field(default_factory=list)

    @property
    def mean_excess(self):
        return float(np.mean(self.excess_risks))

    @property
    def holds(self):
        return all(e <= self.bound_rhs + 1e-12 for e in self.excess_risks)


def gen_bound_check(
    task,
    coeffs,
    d,
    radius,
    n,
    trials=100,
    noise_half_width=0.5,
    rng=None,
    iters=2000,
):
    """Check the excess-risk bound for eigenbasis L1 regression.

    The target is a fixed eigenfunction combination with coefficient
    vector `coeffs`; labels add uniform noise of the given half-width,
    which makes the target the exact risk minimizer with risk b/2 and
    lets excess risk be computed in closed form rather than estimated.

    The bound is ``2dR/sqrt(n) + sqrt(d) (||c_{1:d}|| - R)_+ +
    sqrt(eps / (2 (1 - lambda_{d+1})))`` with eps the target's pair
    discrepancy.
    """
    rng = rng or numkit.rng_stream(0, "gen-bound")
    op = pospair.build_exact(task)
    basis = spectra.exact_eigenbasis(op)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.size > op.p_a.size:
        raise ShapeError("more coefficients than eigenfunctions")
    if not 0 < d <= op.p_a.size:
        raise ShapeError("d must satisfy 0 < d <= |A|")
    full = np.zeros(op.p_a.size)
    full[: coeffs.size] = coeffs
    target = full @ basis.functions
    epsilon = float(np.sum((2.0 - 2.0 * basis.lambdas) * full**2))
    head_norm = float(np.linalg.norm(full[:d]))
    if d < op.p_a.size:
        gap = 1.0 - basis.lambdas[d]
        tail = np.inf if gap <= 0 else np.sqrt(epsilon / (2.0 * gap))
    else:
        tail = 0.0
    bound = (
        2.0 * d * radius / np.sqrt(n)
        + np.sqrt(d) * max(head_norm - radius, 0.0)
        + tail
    )
    rep = basis.functions[:d].T  # (|A|, d)
    b = noise_half_width
    excesses = []
    for _ in range(trials):
        views = rng.choice(op.p_a.size, size=n, p=op.p_a)
        y = target[views] + rng.uniform(-b, b, size=n)
        beta = _erm_l1(rep[views], y, radius, iters=iters)
        risk = _abs_risk_exact(op, rep @ beta, target, b)
        excesses.append(risk - b / 2.0)
    return GenBoundReport(
        d=d,
        radius=float(radius),
        n=int(n),
        epsilon=epsilon,
        best_coeff_norm=head_norm,
        bound_rhs=float(bound),
        excess_risks=excesses,
    )


# ---------------------------------------------------------------------------
# Population loss minima
# ---------------------------------------------------------------------------

_LOSS_EVALS = {
    "xent": ct.population_xent_value,
    "logistic": ct.population_logistic_value,
    "spectral": ct.population_spectral_value,
}


@dataclass
class LossMinReport:
    loss_id: str
    base_value: float
    perturbed_min: float
    n_beaten: int
    n_perturbations: int
    scale_invariant: bool
    rescale_values: dict = field(default_factory=dict)

    @property
    def minimizer_wins(self):
        return self.n_beaten == self.n_perturbations


def loss_minimum_verify(task, loss_id, perturbations=100, scale=0.3, rng=None):
    """The exact pair kernel minimizes each population loss.

    Evaluates the loss at the kernel and at random symmetric
    perturbations; also records the rescaling behavior, which separates
    the scale-invariant softmax loss from the strictly scale-pinned
    other two.
    """
    if loss_id not in _LOSS_EVALS:
        raise ShapeError(f"unknown loss '{loss_id}'")
    rng = rng or numkit.rng_stream(0, "loss-minima")
    op = pospair.build_exact(task)
    evaluate = _LOSS_EVALS[loss_id]
    base = evaluate(op.kernel, op.joint, op.p_a)
    beaten = 0
    perturbed_min = np.inf
    for _ in range(perturbations):
        noise = rng.normal(scale=scale, size=op.kernel.shape)
        noise = 0.5 * (noise + noise.T)
        candidate = op.kernel * np.exp(noise)
        value = evaluate(candidate, op.joint, op.p_a)
        perturbed_min = min(perturbed_min, value)
        if value >= base - 1e-12:
            beaten += 1
    rescales = {
        "0.5": evaluate(0.5 * op.kernel, op.joint, op.p_a),
        "2.0": evaluate(2.0 * op.kernel, op.joint, op.p_a),
        "3.0": evaluate(3.0 * op.kernel, op.joint, op.p_a),
    }
    invariant = all(abs(v - base) <= 1e-10 for v in rescales.values())
    return LossMinReport(
        loss_id=loss_id,
        base_value=float(base),
        perturbed_min=float(perturbed_min),
        n_beaten=beaten,
        n_perturbations=perturbations,
        scale_invariant=invariant,
        rescale_values={k: float(v) for k, v in rescales.items()},
    )
