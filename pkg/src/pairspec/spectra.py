"""Spectral analysis of the positive-pair kernel.

Two deliberately independent routes to the same spectrum live here. The
eigenfunction route diagonalizes the symmetric normalization M of the pair
law and rescales eigenvectors into functions orthonormal under p(a). The
PCA route diagonalizes the covariance of the kernel's feature embedding and
projects views onto the principal directions. Their agreement (variances
equal eigenvalues, projections proportional to eigenfunctions) is the core
numerical claim this package verifies, so neither route may call the other.
"""

from dataclasses import dataclass

import numpy as np

from . import numkit, pospair
from .errors import ShapeError, SymmetryError

#: Eigenvalues closer than this are treated as one eigenspace.
EIGENSPACE_TOL = 1e-6


@dataclass(frozen=True)
class EigenBasis:
    """Markov-chain eigenfunctions of an enumerated task.

    `lambdas` descend; row i of `functions` holds f_i on the view space,
    orthonormal under the marginal weights `p_a`.
    """

    lambdas: np.ndarray
    functions: np.ndarray
    p_a: np.ndarray


@dataclass(frozen=True)
class PcaResult:
    """Principal components of a kernel on a weighted sample.

    `variances` descend. Row i of `projections` is the i-th projection
    function evaluated on the sample. `negative_floor` records the most
    negative raw eigenvalue seen (0.0 for a clean PSD kernel).
    """

    variances: np.ndarray
    projections: np.ndarray
    weights: np.ndarray
    negative_floor: float = 0.0


def _sign_fix_rows(rows):
    out = rows.copy()
    for i in range(out.shape[0]):
        r = out[i]
        peak = np.abs(r).max()
        if peak > 0:
            j = int(np.argmax(np.abs(r) > (1.0 - 1e-9) * peak))
            if r[j] < 0:
                out[i] = -r
    return out


def exact_eigenbasis(op):
    """Eigenfunctions and eigenvalues of the augmentation chain.

    Diagonalizes M = D^{-1/2} p_plus D^{-1/2} and maps eigenvectors v to
    functions f = D^{-1/2} v. The functions satisfy
    E_p[f_i f_j] = delta_ij and E[f_i(a2) | a1] = lambda_i f_i(a1).
    """
    dec = numkit.sym_eigh(op.sym)
    funcs = (dec.eigenvectors / np.sqrt(op.p_a)[:, None]).T
    # The chain's spectrum lies in [-1, 1] and the top eigenvalue of each
    # communicating class equals 1 exactly; project out solver roundoff at
    # ULP scale only, so genuinely slow-mixing spectra stay untouched.
    lambdas = np.clip(dec.eigenvalues, -1.0, 1.0)
    lambdas[np.abs(lambdas - 1.0) < 1e-12] = 1.0
    return EigenBasis(
        lambdas=lambdas, functions=_sign_fix_rows(funcs), p_a=op.p_a.copy()
    )


def population_kpca(op):
    """PCA of the kernel's feature embedding under the view marginal.

    Builds the embedding Phi (one column per view), its weighted covariance
    C = Phi diag(p_a) Phi^T, and returns principal variances with the
    projection functions h_i(a) = u_i . phi(a). Components beyond the
    embedding rank are padded with variance zero and the zero function.
    """
    phi = op.feature_map
    cov = (phi * op.p_a[None, :]) @ phi.T
    dec = numkit.sym_eigh(cov)
    n = op.n_views
    h = dec.eigenvectors.T @ phi
    k = min(phi.shape[0], n)
    variances = np.zeros(n)
    variances[:k] = dec.eigenvalues[:k]
    projections = np.zeros((n, n))
    projections[:k] = h[:k]
    return PcaResult(
        variances=variances,
        projections=_sign_fix_rows(projections),
        weights=op.p_a.copy(),
    )


def kpca_from_kernel(kernel_fn, sample, weights, top=None):
    """Kernel PCA of an arbitrary kernel on a weighted sample.

    Parameters
    ----------
    kernel_fn : callable
        kernel_fn(x, y) -> float, symmetric. Evaluated on all sample pairs.
    sample : sequence
        Points the Gram matrix is built on.
    weights : (n,) array_like
        Positive weights summing to 1 (a distribution over the sample).
    top : int, optional
        Number of components to keep; defaults to all with positive variance.

    Returns
    -------
    PcaResult
        Variances are the eigenvalues of W^{1/2} G W^{1/2}; the projection
        function values on the sample are h_i(a_j) = sigma_i v_ij / sqrt(w_j).
        Raw negative eigenvalues below -1e-6 * ||G|| are reported via
        `negative_floor` (the kernel is then not PSD on the sample).
    """
    n = len(sample)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,) or np.any(weights <= 0):
        raise ShapeError("kpca_from_kernel: weights must be positive, one per point")
    if abs(weights.sum() - 1.0) > 1e-9:
        raise ShapeError("kpca_from_kernel: weights must sum to 1")
    gram = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            gram[i, j] = kernel_fn(sample[i], sample[j])
    scale = max(np.abs(gram).max(), 1e-30)
    asym = np.abs(gram - gram.T).max()
    if asym > 1e-8 * scale:
        raise SymmetryError(f"kpca_from_kernel: kernel asymmetry {asym:.3e}")
    gram = 0.5 * (gram + gram.T)
    rootw = np.sqrt(weights)
    dec = numkit.sym_eigh(gram * np.outer(rootw, rootw))
    negative_floor = float(min(dec.eigenvalues.min(), 0.0))
    keep = dec.eigenvalues > max(1e-12 * scale, 0.0)
    if top is not None:
        keep = keep & (np.arange(n) < int(top))
    idx = np.nonzero(keep)[0]
    sigmas = np.sqrt(dec.eigenvalues[idx])
    projections = (dec.eigenvectors[:, idx] * sigmas[None, :]).T / rootw[None, :]
    return PcaResult(
        variances=dec.eigenvalues[idx],
        projections=_sign_fix_rows(projections),
        weights=weights.copy(),
        negative_floor=negative_floor,
    )


@dataclass(frozen=True)
class NystromMap:
    """Finite-dimensional feature map from kernel values against landmarks.

    phi_hat(a) = pinv_sqrt(K(S, S)) @ K(S, a); inner products of mapped
    points reproduce the kernel exactly on the landmark span.
    """

    landmarks: list
    whitener: np.ndarray
    kernel_fn: object

    def features(self, points):
        """Map points to landmark-space features, one column per point."""
        cross = np.empty((len(self.landmarks), len(points)))
        for i, s in enumerate(self.landmarks):
            for j, a in enumerate(points):
                cross[i, j] = self.kernel_fn(s, a)
        return self.whitener @ cross

    def gram(self, points):
        f = self.features(points)
        return f.T @ f


def nystrom_map(kernel_fn, landmarks, cutoff=None):
    """Build a NystromMap; see the class docstring.

    `cutoff` is passed to pinv_sqrt for dropping near-null landmark
    directions.
    """
    if len(landmarks) == 0:
        raise ShapeError("nystrom_map: need at least one landmark")
    n = len(landmarks)
    gram = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            gram[i, j] = kernel_fn(landmarks[i], landmarks[j])
            gram[j, i] = gram[i, j]
    whitener = numkit.pinv_sqrt(gram, cutoff=cutoff)
    return NystromMap(landmarks=list(landmarks), whitener=whitener, kernel_fn=kernel_fn)


def decompose(basis, g):
    """Coefficients of g in the eigenfunction basis: c_i = E_p[f_i g]."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != basis.p_a.shape:
        raise ShapeError(f"decompose: g has shape {g.shape}")
    return basis.functions @ (basis.p_a * g)


def predicted_discrepancy(lambdas, coeffs):
    """Pair discrepancy predicted from spectral coefficients.

    Each unit of squared coefficient on eigenvalue lambda contributes
    2 - 2 lambda.
    """
    lambdas = np.asarray(lambdas, dtype=np.float64)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if lambdas.shape != coeffs.shape:
        raise ShapeError("predicted_discrepancy: shape mismatch")
    return float(np.sum((2.0 - 2.0 * lambdas) * coeffs**2))


def alignment_matrix(funcs_a, funcs_b, weights):
    """Squared weighted inner products between two sets of functions.

    Both sets are normalized to unit weighted norm internally; rows for
    functions with (numerically) zero norm are left at zero. When funcs_b
    is a complete orthonormal set, each row sums to 1.
    """
    weights = np.asarray(weights, dtype=np.float64)

    def normalize(rows):
        rows = np.asarray(rows, dtype=np.float64)
        norms = np.sqrt(np.maximum((rows**2 * weights[None, :]).sum(axis=1), 0.0))
        safe = np.where(norms > 1e-12, norms, 1.0)
        return np.where(norms[:, None] > 1e-12, rows / safe[:, None], 0.0)

    fa = normalize(funcs_a)
    fb = normalize(funcs_b)
    inner = (fa * weights[None, :]) @ fb.T
    return inner**2


def recover_eigenvalue(op, f):
    """Eigenvalue inferred from a candidate eigenfunction's discrepancy.

    f is normalized to E_p[f^2] = 1 first; the returned value is
    1 - discrepancy / 2, exact when f is a true eigenfunction and stable
    under global rescaling of f (so learned functions with an arbitrary
    scale convention can be assessed).
    """
    f = np.asarray(f, dtype=np.float64)
    norm = np.sqrt(float((f**2 * op.p_a).sum()))
    if norm < 1e-12:
        raise ShapeError("recover_eigenvalue: function is numerically zero")
    f = f / norm
    return 1.0 - 0.5 * pospair.discrepancy(op, f)


def eigenspace_groups(lambdas, tol=EIGENSPACE_TOL):
    """Consecutive index groups whose eigenvalues agree within tol."""
    groups = []
    current = [0]
    for i in range(1, len(lambdas)):
        if abs(lambdas[i] - lambdas[current[-1]]) < tol:
            current.append(i)
        else:
            groups.append(current)
            current = [i]
    if current:
        groups.append(current)
    return groups


def grouped_alignment_rowsums(align, groups):
    """Worst per-function alignment mass captured inside the matching eigenspace.

    `groups` indexes eigenspaces on both axes (the two bases must share a
    spectrum for this to be meaningful). Summing each row over its own
    eigenspace block is rotation-invariant within the block; the minimum
    over the block's rows is returned per group.
    """
    sums = []
    for g in groups:
        block = align[np.ix_(g, g)]
        sums.append(float(block.sum(axis=1).min()))
    return np.array(sums)
