"""Finite synthetic tasks: a latent variable z and views a drawn from p(a|z).

Two view families are supported. Enumerated views are grid points with the
conditional table stored densely, so every population quantity is exact.
Multiset views are unordered draws of k pixels from a per-latent intensity
grid; the view space is too large to enumerate but conditionals stay
computable in closed form through the multinomial mass function.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CoverageError, GenerationError, ShapeError, UnreachableViewError

#: Uniform mass mixed into every intensity grid so no pixel is impossible.
INTENSITY_FLOOR = 1e-4

#: Marginals below this are treated as unreachable views.
MARGINAL_FLOOR = 1e-300


@dataclass(frozen=True, eq=False)
class EnumeratedViews:
    """View space listed exhaustively; `features` is the encoder input row per view."""

    count: int
    features: np.ndarray
    grid_shape: tuple | None = None


@dataclass(frozen=True, eq=False)
class MultisetViews:
    """Views are unordered multisets of k cell draws from a flattened grid."""

    cells: int
    k: int
    grid_shape: tuple


@dataclass(frozen=True, eq=False)
class FiniteTask:
    """Joint law of (z, a) plus optional class labels on latents.

    For enumerated views `cond` is the |Z| x |A| table p(a|z). For multiset
    views `cond` holds per-latent, per-copy intensity grids of shape
    (|Z|, copies, cells); the conditional is the copy-averaged multinomial.
    """

    p_z: np.ndarray
    views: EnumeratedViews | MultisetViews
    cond: np.ndarray
    labels: np.ndarray | None = None
    _marginal_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_latents(self):
        return self.p_z.shape[0]

    @property
    def enumerated(self):
        return isinstance(self.views, EnumeratedViews)


def _freeze(a):
    a = np.asarray(a)
    if a.dtype.kind == "f":
        a = a.astype(np.float64, copy=False)
    a.setflags(write=False)
    return a


def gen_regions_task(grid_w, grid_h, regions, rng=None):
    """Enumerated task: latents are axis-aligned rectangles on a grid.

    Each latent z is a rectangle (x0, y0, w, h); p(z) is uniform over the
    rectangles and p(a|z) is uniform over the grid points the rectangle
    covers. Every grid point must lie in at least one rectangle.

    Parameters
    ----------
    grid_w, grid_h : int
        Grid dimensions; views are the grid_w * grid_h points, row-major
        (index = y * grid_w + x).
    regions : sequence of (x0, y0, w, h)
        Integer rectangles, clipped to the grid. A rectangle covering no
        grid point is an error, as is any uncovered grid point.
    rng : unused
        Accepted for signature uniformity; construction is deterministic.

    Returns
    -------
    FiniteTask
    """
    grid_w, grid_h = int(grid_w), int(grid_h)
    if grid_w < 1 or grid_h < 1 or not regions:
        raise GenerationError("gen_regions_task: empty grid or region list")
    n_views = grid_w * grid_h
    cond = np.zeros((len(regions), n_views))
    for zi, (x0, y0, w, h) in enumerate(regions):
        xs = np.arange(max(int(x0), 0), min(int(x0) + int(w), grid_w))
        ys = np.arange(max(int(y0), 0), min(int(y0) + int(h), grid_h))
        if xs.size == 0 or ys.size == 0:
            raise GenerationError(
                f"gen_regions_task: region {zi} covers no grid point"
            )
        idx = (ys[:, None] * grid_w + xs[None, :]).ravel()
        cond[zi, idx] = 1.0 / idx.size
    p_z = np.full(len(regions), 1.0 / len(regions))
    marginal = p_z @ cond
    uncovered = np.nonzero(marginal <= 0.0)[0]
    if uncovered.size:
        y, x = divmod(int(uncovered[0]), grid_w)
        raise CoverageError(
            f"gen_regions_task: grid point ({x}, {y}) lies in no region"
        )
    # Encoder input: grid coordinates scaled to [-1, 1] per axis.
    ys, xs = np.divmod(np.arange(n_views), grid_w)
    def scale(v, n):
        return (2.0 * v - (n - 1)) / max(n - 1, 1)
    features = np.stack([scale(xs, grid_w), scale(ys, grid_h )], axis=1)
    views = EnumeratedViews(
        count=n_views, features=_freeze(features), grid_shape=(grid_h, grid_w)
    )
    return FiniteTask(p_z=_freeze(p_z), views=views, cond=_freeze(cond))


def chain_task():
    """Three views on a line, two overlapping two-point regions.

    The smallest task with a nontrivial spectrum; used throughout the tests.
    """
    return gen_regions_task(3, 1, [(0, 0, 2, 1), (1, 0, 2, 1)])


def _blur_grid(img, sigma):
    # Separable Gaussian blur with a small truncated kernel; avoids any
    # dependency beyond numpy. Edges are renormalized (kernel clipped).
    if sigma <= 0:
        return img
    radius = max(int(np.ceil(3.0 * sigma)), 1)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kern = np.exp(-0.5 * (x / sigma) ** 2)
    kern /= kern.sum()
    def conv1d(arr, axis):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (radius, radius)
        padded = np.pad(arr, pad, mode="constant")
        out = np.zeros_like(arr)
        weight = np.zeros_like(arr)
        ones = np.pad(np.ones_like(arr), pad, mode="constant")
        for i, kv in enumerate(kern):
            sl = [slice(None), slice(None)]
            sl[axis] = slice(i, i + arr.shape[axis])
            out += kv * padded[tuple(sl)]
            weight += kv * ones[tuple(sl)]
        return out / weight
    return conv1d(conv1d(img, 0), 1)


def gen_sprite_task(
    grid,
    class_count,
    sprites_per_class,
    rng,
    copies=4,
    k=10,
    blur=0.6,
    jitter=1,
):
    """Multiset task: latents are procedural sprites on a grid.

    Each class fixes a handful of blob anchors; each sprite jitters those
    anchors and renders a positive intensity grid; each of the `copies`
    perturbed copies translates and blurs the sprite. A uniform mass of
    INTENSITY_FLOOR is mixed in so every cell stays reachable, and each copy
    is normalized to a distribution over cells. A view is k pixel positions
    drawn with replacement from a uniformly chosen copy.

    Returns
    -------
    FiniteTask
        With labels[z] = class index of sprite z.
    """
    grid = int(grid)
    if grid < 2 or class_count < 1 or sprites_per_class < 1 or copies < 1 or k < 1:
        raise GenerationError("gen_sprite_task: degenerate size parameter")
    cells = grid * grid
    yy, xx = np.mgrid[0:grid, 0:grid].astype(np.float64)
    n_latents = class_count * sprites_per_class
    cond = np.zeros((n_latents, copies, cells))
    labels = np.zeros(n_latents, dtype=np.int64)
    zi = 0
    for c in range(class_count):
        n_anchors = int(rng.integers(2, 5))
        anchors = rng.uniform(grid * 0.15, grid * 0.85, size=(n_anchors, 2))
        widths = rng.uniform(grid * 0.08, grid * 0.22, size=n_anchors)
        amps = rng.uniform(0.5, 1.0, size=n_anchors)
        for _ in range(sprites_per_class):
            centers = anchors + rng.normal(scale=0.35, size=anchors.shape)
            base = np.zeros((grid, grid))
            for (cy, cx), wdt, amp in zip(centers, widths, amps):
                base += amp * np.exp(
                    -0.5 * (((yy - cy) / wdt) ** 2 + ((xx - cx) / wdt) ** 2)
                )
            for ci in range(copies):
                dy, dx = rng.integers(-jitter, jitter + 1, size=2)
                img = np.roll(np.roll(base, int(dy), axis=0), int(dx), axis=1)
                img = _blur_grid(img, blur)
                total = img.sum()
                if total <= 0.0:
                    raise GenerationError(
                        f"gen_sprite_task: sprite {zi} copy {ci} is all zero"
                    )
                img = img / total
                img = (1.0 - INTENSITY_FLOOR) * img + INTENSITY_FLOOR / cells
                cond[zi, ci] = img.ravel()
            labels[zi] = c
            zi += 1
    p_z = np.full(n_latents, 1.0 / n_latents)
    views = MultisetViews(cells=cells, k=int(k), grid_shape=(grid, grid))
    return FiniteTask(
        p_z=_freeze(p_z), views=views, cond=_freeze(cond), labels=_freeze(labels)
    )


def canonical_view(task, view):
    """Canonical hashable form of a view sample."""
    if task.enumerated:
        return int(view)
    return tuple(sorted(int(c) for c in view))


def _multiset_counts(view, cells):
    counts = np.zeros(cells, dtype=np.int64)
    for c in view:
        counts[c] += 1
    return counts


def cond_prob(task, z, view):
    """Exact conditional probability p(view | z).

    Enumerated views read the stored table. Multiset views average the
    multinomial mass over the latent's perturbed copies:
    mean_c [ k! / prod(m_i!) * prod q_{c,i}^{m_i} ] for cell counts m.
    """
    z = int(z)
    if not 0 <= z < task.n_latents:
        raise ShapeError(f"cond_prob: latent {z} out of range")
    if task.enumerated:
        return float(task.cond[z, int(view)])
    counts = _multiset_counts(view, task.views.cells)
    k = int(counts.sum())
    if k != task.views.k:
        raise ShapeError(
            f"cond_prob: view has {k} draws, task expects {task.views.k}"
        )
    coeff = math.factorial(k)
    support = np.nonzero(counts)[0]
    for c in support:
        coeff //= math.factorial(int(counts[c]))
    total = 0.0
    for copy in range(task.cond.shape[1]):
        q = task.cond[z, copy]
        total += float(np.prod(q[support] ** counts[support]))
    return coeff * total / task.cond.shape[1]


def marginal_prob(task, view):
    """p(view) = sum_z p(z) p(view | z), cached per canonical view."""
    key = canonical_view(task, view)
    cache = task._marginal_cache
    if key not in cache:
        if task.enumerated:
            cache[key] = float(task.p_z @ task.cond[:, key])
        else:
            cache[key] = float(
                sum(
                    task.p_z[z] * cond_prob(task, z, view)
                    for z in range(task.n_latents)
                )
            )
    return cache[key]


def marginals(task):
    """Full marginal vector p(a) for enumerated tasks."""
    if not task.enumerated:
        raise ShapeError("marginals: defined only for enumerated view spaces")
    return task.p_z @ task.cond


def sample_view_given(task, z, rng):
    """One view drawn from p(a | z)."""
    if task.enumerated:
        return int(rng.choice(task.views.count, p=task.cond[z]))
    copy = int(rng.integers(task.cond.shape[1]))
    cells = rng.choice(task.views.cells, size=task.views.k, p=task.cond[z, copy])
    return tuple(sorted(int(c) for c in cells))


def sample_pair(task, rng):
    """One positive pair: z ~ p(z), then two conditionally independent views.

    Returns
    -------
    (view1, view2, z)
    """
    z = int(rng.choice(task.n_latents, p=task.p_z))
    return sample_view_given(task, z, rng), sample_view_given(task, z, rng), z


def sample_view(task, rng):
    """One view from the marginal p(a) = sum_z p(z) p(a|z)."""
    z = int(rng.choice(task.n_latents, p=task.p_z))
    return sample_view_given(task, z, rng)


def posterior_over_latents(task, view):
    """p(z | view) as a dense vector."""
    if task.enumerated:
        joint = task.p_z * task.cond[:, int(view)]
    else:
        joint = task.p_z * np.array(
            [cond_prob(task, z, view) for z in range(task.n_latents)]
        )
    total = joint.sum()
    if total < MARGINAL_FLOOR:
        raise UnreachableViewError("posterior_over_latents: view has zero marginal")
    return joint / total


def sample_chain(task, start, steps, rng):
    """Alternating Markov chain a -> z -> a' started at a given view.

    Each step draws z_t ~ p(z | a_t) then a_{t+1} ~ p(a | z_t). Returns a
    list of (view, latent) entries of length steps + 1; the latent stored
    with a_t is the one that produced a_{t+1}, None on the final entry.
    """
    if marginal_prob(task, start) < MARGINAL_FLOOR:
        raise UnreachableViewError("sample_chain: start view has zero marginal")
    if steps < 0:
        raise ShapeError("sample_chain: steps must be nonnegative")
    trajectory = []
    current = canonical_view(task, start)
    for _ in range(int(steps)):
        post = posterior_over_latents(task, current)
        z = int(rng.choice(task.n_latents, p=post))
        trajectory.append((current, z))
        current = sample_view_given(task, z, rng)
    trajectory.append((current, None))
    return trajectory


def feature_dim(task):
    """Length of the rows view_features produces for this task."""
    if task.enumerated:
        return task.views.features.shape[1]
    return task.views.cells


def view_features(task, views_list):
    """Encoder input rows for a list of views.

    Enumerated: stored coordinate features. Multiset: cell-count histogram
    divided by k, a fixed-length simplex vector.
    """
    if task.enumerated:
        idx = np.asarray(views_list, dtype=np.int64)
        return task.views.features[idx]
    rows = np.zeros((len(views_list), task.views.cells))
    for i, v in enumerate(views_list):
        rows[i] = _multiset_counts(v, task.views.cells) / task.views.k
    return rows


def save_task_json(path, task):
    """Serialize a task to JSON (schema_version 1)."""
    doc = {
        "schema_version": 1,
        "kind": "enumerated" if task.enumerated else "multiset",
        "p_z": task.p_z.tolist(),
        "labels": None if task.labels is None else task.labels.tolist(),
    }
    if task.enumerated:
        doc["views"] = {
            "count": task.views.count,
            "features": task.views.features.tolist(),
            "grid_shape": list(task.views.grid_shape) if task.views.grid_shape else None,
        }
        doc["cond"] = task.cond.tolist()
    else:
        doc["views"] = {
            "cells": task.views.cells,
            "k": task.views.k,
            "grid_shape": list(task.views.grid_shape),
        }
        doc["cond"] = task.cond.tolist()
    with open(path, "w", encoding="ascii") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return str(path)


def load_task_json(path):
    with open(path, "r", encoding="ascii") as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != 1:
        raise ShapeError(f"load_task_json: unsupported schema {doc.get('schema_version')}")
    labels = None if doc["labels"] is None else _freeze(np.array(doc["labels"]))
    if doc["kind"] == "enumerated":
        vi = doc["views"]
        views = EnumeratedViews(
            count=int(vi["count"]),
            features=_freeze(np.array(vi["features"])),
            grid_shape=tuple(vi["grid_shape"]) if vi["grid_shape"] else None,
        )
    else:
        vi = doc["views"]
        views = MultisetViews(
            cells=int(vi["cells"]), k=int(vi["k"]), grid_shape=tuple(vi["grid_shape"])
        )
    return FiniteTask(
        p_z=_freeze(np.array(doc["p_z"])),
        views=views,
        cond=_freeze(np.array(doc["cond"])),
        labels=labels,
    )


def random_enumerated_task(n_latents, n_views, rng, concentration=1.0):
    """Random dense task with full-support Dirichlet conditionals.

    Used by tests: every view is reachable from every latent, so the
    augmentation chain has a single communicating class.
    """
    cond = rng.dirichlet(np.full(n_views, concentration), size=n_latents)
    cond = np.maximum(cond, 1e-12)
    cond /= cond.sum(axis=1, keepdims=True)
    p_z = rng.dirichlet(np.full(n_latents, 2.0))
    p_z = np.maximum(p_z, 1e-6)
    p_z /= p_z.sum()
    features = rng.normal(size=(n_views, 3))
    views = EnumeratedViews(count=n_views, features=_freeze(features))
    return FiniteTask(p_z=_freeze(p_z), views=views, cond=_freeze(cond))
