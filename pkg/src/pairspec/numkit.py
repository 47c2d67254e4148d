"""Dense symmetric linear algebra, deterministic random streams, matrix I/O.

Everything downstream (kernel construction, spectral analysis, training)
funnels its numerics through this module so that ordering and sign
conventions are fixed in exactly one place.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, NotPsdError, ShapeError, SymmetryError

#: Relative symmetry tolerance accepted by the symmetric eigensolver.
SYM_TOL = 1e-12

#: Residual bound enforced on every eigenpair, relative to ||A||_F.
RESIDUAL_TOL = 1e-8

MAGIC = b"PSPEC1"


@dataclass(frozen=True)
class EigDecomposition:
    """Eigenvalues in descending order and matching unit eigenvector columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def _check_square_symmetric(a, where):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"{where}: expected square matrix, got shape {a.shape}")
    scale = np.abs(a).max() if a.size else 0.0
    if scale > 0.0 and np.abs(a - a.T).max() > SYM_TOL * max(scale, 1.0):
        raise SymmetryError(f"{where}: matrix is not symmetric within {SYM_TOL:g}")
    return a


def sym_eigh(a):
    """Full eigendecomposition of a symmetric matrix.

    Parameters
    ----------
    a : (n, n) array_like
        Symmetric matrix. Asymmetry beyond ``SYM_TOL`` (relative) is an error.

    Returns
    -------
    EigDecomposition
        Eigenvalues sorted descending (ties keep a stable order) with unit
        eigenvectors as the matching columns. Each eigenvector is sign
        normalized so its first component of non-negligible magnitude is
        positive, making repeated calls on equal input bit-identical.

    Raises
    ------
    ShapeError, SymmetryError
        If the input is not square symmetric.
    ConvergenceError
        If any eigenpair residual ||A v - w v|| exceeds RESIDUAL_TOL * ||A||_F.
    """
    a = _check_square_symmetric(a, "sym_eigh")
    a = 0.5 * (a + a.T)
    try:
        w, v = np.linalg.eigh(a)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise ConvergenceError(f"sym_eigh: eigensolver failed: {exc}") from exc
    order = np.argsort(-w, kind="stable")
    w = w[order]
    v = v[:, order]
    # Sign convention: first component with magnitude above a relative floor
    # is made positive.
    for j in range(v.shape[1]):
        col = v[:, j]
        floor = 1e-12 * np.abs(col).max()
        nz = np.nonzero(np.abs(col) > floor)[0]
        if nz.size and col[nz[0]] < 0:
            v[:, j] = -col
    norm_a = np.linalg.norm(a)
    if norm_a > 0.0:
        residual = np.abs(a @ v - v * w[None, :]).max(axis=0)
        worst = residual.max()
        if worst > RESIDUAL_TOL * norm_a:
            raise ConvergenceError(
                f"sym_eigh: residual {worst:.3e} exceeds {RESIDUAL_TOL:g} * ||A||_F"
            )
    return EigDecomposition(eigenvalues=w, eigenvectors=v)


def pinv_sqrt(a, cutoff=None):
    """Pseudo-inverse square root of a symmetric PSD matrix.

    Eigenvalues at or below ``cutoff`` are dropped; on the retained
    eigenspace the result B satisfies B @ B = pinv(A), and B @ A @ B is the
    orthogonal projector onto that eigenspace.

    Parameters
    ----------
    a : (n, n) array_like
        Symmetric matrix, PSD up to an eigenvalue tolerance of
        -1e-10 * max|eigenvalue|.
    cutoff : float, optional
        Absolute eigenvalue cutoff. Defaults to 1e-10 * largest eigenvalue.

    Returns
    -------
    (n, n) ndarray
        Symmetric pseudo-inverse square root.
    """
    a = _check_square_symmetric(a, "pinv_sqrt")
    dec = sym_eigh(a)
    w, v = dec.eigenvalues, dec.eigenvectors
    scale = np.abs(w).max() if w.size else 0.0
    if scale > 0.0 and w.min() < -1e-10 * scale:
        raise NotPsdError(
            f"pinv_sqrt: negative eigenvalue {w.min():.3e} below tolerance"
        )
    if cutoff is None:
        cutoff = 1e-10 * max(scale, 0.0)
    inv_sqrt = np.where(w > cutoff, 1.0 / np.sqrt(np.maximum(w, cutoff)), 0.0)
    b = (v * inv_sqrt[None, :]) @ v.T
    return 0.5 * (b + b.T)


def rng_stream(seed, label):
    """Deterministic, independent random substream.

    The stream is a counter-based Philox generator keyed by the 64-bit seed
    and a stable hash of the label, so distinct labels give statistically
    independent streams and equal (seed, label) pairs reproduce bit-identical
    draws across processes.

    Parameters
    ----------
    seed : int
        Base seed, reduced modulo 2**64.
    label : str
        Substream name, e.g. "task", "train", "negatives".

    Returns
    -------
    numpy.random.Generator
    """
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    spawn_key = tuple(
        int.from_bytes(digest[i : i + 8], "little") for i in range(0, 16, 8)
    )
    ss = np.random.SeedSequence(entropy=int(seed) % (1 << 64), spawn_key=spawn_key)
    return np.random.Generator(np.random.Philox(ss))


def save_matrix_csv(path, a):
    """Write a dense matrix as CSV with full-precision decimals."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"save_matrix_csv: expected 2-D array, got shape {a.shape}")
    with open(path, "w", encoding="ascii") as fh:
        for row in a:
            fh.write(",".join(format(x, ".17g") for x in row))
            fh.write("\n")
    return str(path)


def load_matrix_csv(path):
    """Read a matrix written by save_matrix_csv."""
    rows = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(tok) for tok in line.split(",")])
    if not rows:
        raise ShapeError(f"load_matrix_csv: {path} holds no rows")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ShapeError(f"load_matrix_csv: ragged rows in {path}")
    return np.array(rows, dtype=np.float64)


def save_matrix_bin(path, a):
    """Write a dense matrix in the PSPEC1 binary layout.

    Layout: 6 magic bytes, two little-endian uint64 dimensions, then
    row-major little-endian float64 payload.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"save_matrix_bin: expected 2-D array, got shape {a.shape}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.array(a.shape, dtype="<u8").tobytes())
        fh.write(a.astype("<f8", copy=False).tobytes())
    return str(path)


def load_matrix_bin(path):
    """Read a matrix written by save_matrix_bin, validating magic and size."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise ShapeError(f"load_matrix_bin: {path} lacks the PSPEC1 magic")
    dims = np.frombuffer(blob, dtype="<u8", count=2, offset=len(MAGIC))
    rows, cols = int(dims[0]), int(dims[1])
    start = len(MAGIC) + 16
    expected = rows * cols * 8
    if len(blob) - start != expected:
        raise ShapeError(
            f"load_matrix_bin: payload of {path} is {len(blob) - start} bytes, "
            f"expected {expected}"
        )
    data = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=start)
    return data.reshape(rows, cols).astype(np.float64)
