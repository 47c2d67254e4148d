"""Figure rendering for pipeline outputs.

Every function takes plain arrays plus an output path, renders with the
Agg backend, and returns the path. PNG metadata is pinned so repeated
runs of the same pipeline produce byte-identical files.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ShapeError

_SAVE_KW = {"dpi": 110, "metadata": {"Software": "pairspec"}}


def _finish(fig, path):
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return str(path)


def alignment_heatmap(align, path, row_label="learned", col_label="exact"):
    """Heatmap of squared alignment between two function families."""
    align = np.atleast_2d(np.asarray(align, dtype=np.float64))
    fig, ax = plt.subplots(figsize=(5.0, 4.2))
    im = ax.imshow(align, vmin=0.0, vmax=1.0, cmap="viridis", aspect="auto")
    ax.set_xlabel(f"{col_label} component")
    ax.set_ylabel(f"{row_label} component")
    ax.set_title("squared alignment")
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _finish(fig, path)


def eigenvalue_discrepancy_scatter(lambdas, discrepancies, path):
    """Eigenvalue vs discrepancy, against the exact line y = 2 - 2x."""
    lambdas = np.asarray(lambdas, dtype=np.float64)
    discrepancies = np.asarray(discrepancies, dtype=np.float64)
    if lambdas.shape != discrepancies.shape:
        raise ShapeError("eigenvalues and discrepancies must align")
    fig, ax = plt.subplots(figsize=(5.0, 4.2))
    grid = np.linspace(min(0.0, lambdas.min()), 1.0, 64)
    ax.plot(grid, 2.0 - 2.0 * grid, color="gray", lw=1.0, label="2 - 2λ")
    ax.scatter(lambdas, discrepancies, s=28, color="tab:blue", zorder=3)
    ax.set_xlabel("eigenvalue")
    ax.set_ylabel("pair discrepancy")
    ax.legend(frameon=False)
    return _finish(fig, path)


def loss_curve_figure(curve, path, component_names=()):
    """Training curve: total loss plus any per-component series."""
    if not curve:
        raise ShapeError("empty training curve")
    steps = [c[0] for c in curve]
    totals = [c[1] for c in curve]
    fig, ax = plt.subplots(figsize=(5.6, 4.0))
    ax.plot(steps, totals, lw=1.2, color="black", label="total")
    parts = sorted(curve[0][2]) if len(curve[0]) > 2 else []
    names = dict(component_names)
    for key in parts:
        series = [c[2][key] for c in curve]
        ax.plot(steps, series, lw=0.9, alpha=0.75, label=names.get(key, str(key)))
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(frameon=False, fontsize=8)
    return _finish(fig, path)


def chain_trajectory_figure(values, path):
    """Eigenfunction values along sampled chain trajectories.

    Parameters
    ----------
    values : ndarray
        Shape (n_chains, steps, n_functions).
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 3:
        raise ShapeError("expected (chains, steps, functions) array")
    n_chains, _, n_fn = values.shape
    fig, axes = plt.subplots(
        n_fn, 1, figsize=(5.6, 1.9 * n_fn), sharex=True, squeeze=False
    )
    for j in range(n_fn):
        ax = axes[j][0]
        for c in range(n_chains):
            ax.plot(values[c, :, j], lw=0.9, alpha=0.8)
        ax.set_ylabel(f"f{j + 1}")
    axes[-1][0].set_xlabel("chain step")
    fig.tight_layout()
    return _finish(fig, path)


def eigenfunction_grid_figure(functions, grid_shape, path, per_row=4):
    """Eigenfunctions over a spatial grid, one heatmap per function."""
    functions = np.atleast_2d(np.asarray(functions, dtype=np.float64))
    h, w = grid_shape
    if functions.shape[1] != h * w:
        raise ShapeError("function length does not match the grid")
    n = functions.shape[0]
    rows = (n + per_row - 1) // per_row
    fig, axes = plt.subplots(
        rows, per_row, figsize=(2.1 * per_row, 2.1 * rows), squeeze=False
    )
    scale = np.abs(functions).max() or 1.0
    for i in range(rows * per_row):
        ax = axes[i // per_row][i % per_row]
        ax.set_xticks([])
        ax.set_yticks([])
        if i < n:
            ax.imshow(
                functions[i].reshape(h, w),
                cmap="RdBu_r",
                vmin=-scale,
                vmax=scale,
            )
            ax.set_title(f"f{i + 1}", fontsize=9)
        else:
            ax.axis("off")
    fig.tight_layout()
    return _finish(fig, path)


def marginal_figure(p_a, path, grid_shape=None):
    """View marginal, as a grid heatmap when a layout is known."""
    p_a = np.asarray(p_a, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    if grid_shape is not None:
        h, w = grid_shape
        im = ax.imshow(p_a.reshape(h, w), cmap="magma")
        fig.colorbar(im, ax=ax, fraction=0.046)
    else:
        ax.bar(np.arange(p_a.size), p_a, color="tab:blue")
        ax.set_xlabel("view")
    ax.set_title("view marginal")
    return _finish(fig, path)
