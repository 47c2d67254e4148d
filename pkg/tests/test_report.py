"""Figure rendering: files appear, bad shapes are rejected, bytes repeat."""

import numpy as np
import pytest

from pairspec import report
from pairspec.errors import ShapeError


def _png_ok(path_str, tmp_path):
    path = tmp_path / path_str if isinstance(path_str, str) else path_str
    data = open(path_str, "rb").read()
    assert data[:8] == b"\x89PNG\r\n\x1a\n"
    assert len(data) > 600
    return data


def test_alignment_heatmap_writes_png(tmp_path):
    align = np.eye(3) * 0.9
    out = report.alignment_heatmap(align, tmp_path / "a.png")
    assert out == str(tmp_path / "a.png")
    _png_ok(out, tmp_path)


def test_scatter_rejects_mismatched_lengths(tmp_path):
    with pytest.raises(ShapeError):
        report.eigenvalue_discrepancy_scatter(
            [1.0, 0.5], [0.0], tmp_path / "s.png"
        )


def test_scatter_writes_png(tmp_path):
    out = report.eigenvalue_discrepancy_scatter(
        [1.0, 0.5, 0.0], [0.0, 1.0, 2.0], tmp_path / "s.png"
    )
    _png_ok(out, tmp_path)


def test_loss_curve_rejects_empty(tmp_path):
    with pytest.raises(ShapeError):
        report.loss_curve_figure([], tmp_path / "c.png")


def test_loss_curve_with_components(tmp_path):
    curve = [
        (s, 1.0 / (s + 1), {"xent": 0.8 / (s + 1), "spectral": 0.2 / (s + 1)})
        for s in range(20)
    ]
    _png_ok(report.loss_curve_figure(curve, tmp_path / "c.png"), tmp_path)


def test_chain_trajectories_require_3d(tmp_path):
    with pytest.raises(ShapeError):
        report.chain_trajectory_figure(np.zeros((4, 5)), tmp_path / "t.png")
    out = report.chain_trajectory_figure(
        np.random.default_rng(0).normal(size=(3, 12, 2)), tmp_path / "t.png"
    )
    _png_ok(out, tmp_path)


def test_eigenfunction_grid_checks_length(tmp_path):
    with pytest.raises(ShapeError):
        report.eigenfunction_grid_figure(
            np.ones((2, 5)), (2, 3), tmp_path / "g.png"
        )
    out = report.eigenfunction_grid_figure(
        np.random.default_rng(1).normal(size=(5, 6)), (2, 3), tmp_path / "g.png"
    )
    _png_ok(out, tmp_path)


def test_marginal_figure_both_layouts(tmp_path):
    p = np.full(6, 1.0 / 6.0)
    _png_ok(report.marginal_figure(p, tmp_path / "m1.png"), tmp_path)
    _png_ok(
        report.marginal_figure(p, tmp_path / "m2.png", grid_shape=(2, 3)),
        tmp_path,
    )


def test_rerender_is_byte_identical(tmp_path):
    align = np.array([[1.0, 0.1], [0.2, 0.8]])
    a = report.alignment_heatmap(align, tmp_path / "r1.png")
    b = report.alignment_heatmap(align, tmp_path / "r2.png")
    assert open(a, "rb").read() == open(b, "rb").read()
