"""Experiment configuration: JSON documents validated by hand.

The schema is strict: unknown keys are rejected with the full field
path, every leaf is type- and range-checked, and validation fills in
defaults so downstream code reads a complete document.
"""

import json

from .errors import ConfigError

HEAD_KINDS = ("linear", "hypersphere", "rational_quadratic")
BIAS_KINDS = ("global", "local", "zero")
TASK_KINDS = ("chain", "regions", "random", "sprites", "file")
LOSS_IDS = ("xent", "logistic", "spectral")


def _fail(path, message):
    raise ConfigError(path, message)


def _require_map(doc, path):
    if not isinstance(doc, dict):
        _fail(path, f"expected an object, got {type(doc).__name__}")
    return doc


def _check_keys(doc, path, allowed):
    for key in doc:
        if key not in allowed:
            _fail(f"{path}.{key}" if path else key, "unknown key")


def _get_int(doc, path, key, default=None, minimum=None, maximum=None):
    value = doc.get(key, default)
    where = f"{path}.{key}" if path else key
    if value is None:
        _fail(where, "required")
    if isinstance(value, bool) or not isinstance(value, int):
        _fail(where, f"expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        _fail(where, f"must be >= {minimum}, got {value}")
    if maximum is not None and value > maximum:
        _fail(where, f"must be <= {maximum}, got {value}")
    return value


def _get_real(doc, path, key, default=None, minimum=None, exclusive_min=None):
    value = doc.get(key, default)
    where = f"{path}.{key}" if path else key
    if value is None:
        _fail(where, "required")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        _fail(where, f"expected a number, got {value!r}")
    value = float(value)
    if minimum is not None and value < minimum:
        _fail(where, f"must be >= {minimum}, got {value}")
    if exclusive_min is not None and value <= exclusive_min:
        _fail(where, f"must be > {exclusive_min}, got {value}")
    return value


def _get_bool(doc, path, key, default):
    value = doc.get(key, default)
    if not isinstance(value, bool):
        _fail(f"{path}.{key}", f"expected true/false, got {value!r}")
    return value


def _get_choice(doc, path, key, choices, default=None):
    value = doc.get(key, default)
    where = f"{path}.{key}" if path else key
    if value is None:
        _fail(where, "required")
    if value not in choices:
        _fail(where, f"expected one of {list(choices)}, got {value!r}")
    return value


def _get_int_list(doc, path, key, default, minimum=0):
    value = doc.get(key, default)
    where = f"{path}.{key}"
    if not isinstance(value, list):
        _fail(where, f"expected a list, got {value!r}")
    out = []
    for i, item in enumerate(value):
        if isinstance(item, bool) or not isinstance(item, int):
            _fail(f"{where}[{i}]", f"expected an integer, got {item!r}")
        if item < minimum:
            _fail(f"{where}[{i}]", f"must be >= {minimum}, got {item}")
        out.append(item)
    return out


def _validate_task(doc, path="task"):
    doc = _require_map(doc, path)
    kind = _get_choice(doc, path, "kind", TASK_KINDS)
    out = {"kind": kind}
    if kind == "chain":
        _check_keys(doc, path, {"kind"})
    elif kind == "regions":
        _check_keys(doc, path, {"kind", "grid", "regions"})
        grid = doc.get("grid")
        if (
            not isinstance(grid, list)
            or len(grid) != 2
            or any(isinstance(g, bool) or not isinstance(g, int) or g < 1 for g in grid)
        ):
            _fail(f"{path}.grid", "expected [width, height] positive integers")
        regions = doc.get("regions")
        if not isinstance(regions, list) or not regions:
            _fail(f"{path}.regions", "expected a nonempty list of rectangles")
        boxes = []
        for i, box in enumerate(regions):
            if (
                not isinstance(box, list)
                or len(box) != 4
                or any(isinstance(b, bool) or not isinstance(b, int) for b in box)
            ):
                _fail(f"{path}.regions[{i}]", "expected [x0, y0, w, h] integers")
            boxes.append(tuple(box))
        out["grid"] = (grid[0], grid[1])
        out["regions"] = boxes
    elif kind == "random":
        _check_keys(doc, path, {"kind", "n_latents", "n_views", "concentration"})
        out["n_latents"] = _get_int(doc, path, "n_latents", minimum=1)
        out["n_views"] = _get_int(doc, path, "n_views", minimum=2)
        out["concentration"] = _get_real(
            doc, path, "concentration", default=1.0, exclusive_min=0.0
        )
    elif kind == "sprites":
        _check_keys(
            doc,
            path,
            {"kind", "grid", "classes", "sprites_per_class", "copies", "k"},
        )
        out["grid"] = _get_int(doc, path, "grid", default=6, minimum=2)
        out["classes"] = _get_int(doc, path, "classes", default=2, minimum=1)
        out["sprites_per_class"] = _get_int(
            doc, path, "sprites_per_class", default=2, minimum=1
        )
        out["copies"] = _get_int(doc, path, "copies", default=4, minimum=1)
        out["k"] = _get_int(doc, path, "k", default=10, minimum=1)
    else:  # file
        _check_keys(doc, path, {"kind", "path"})
        p = doc.get("path")
        if not isinstance(p, str) or not p:
            _fail(f"{path}.path", "expected a file path")
        out["path"] = p
    return out


def _validate_head(doc, path="model.head"):
    doc = _require_map(doc, path)
    kind = _get_choice(doc, path, "kind", HEAD_KINDS)
    out = {"kind": kind, "dim": _get_int(doc, path, "dim", minimum=1)}
    if kind == "linear":
        _check_keys(doc, path, {"kind", "dim", "norm"})
        norm = doc.get("norm")
        if norm is not None:
            out["norm"] = _get_real(doc, path, "norm", exclusive_min=0.0)
    elif kind == "hypersphere":
        _check_keys(doc, path, {"kind", "dim", "bias", "init_temp", "learn_temp"})
        out["bias"] = _get_choice(doc, path, "bias", BIAS_KINDS, default="global")
        out["init_temp"] = _get_real(
            doc, path, "init_temp", default=0.5, exclusive_min=0.0
        )
        out["learn_temp"] = _get_bool(doc, path, "learn_temp", True)
    else:
        _check_keys(doc, path, {"kind", "dim", "init_alpha"})
        out["init_alpha"] = _get_real(
            doc, path, "init_alpha", default=1.0, exclusive_min=0.0
        )
    return out


def _validate_model(doc, path="model"):
    doc = _require_map(doc, path)
    _check_keys(doc, path, {"hidden", "head"})
    if "head" not in doc:
        _fail(f"{path}.head", "required")
    return {
        "hidden": _get_int_list(doc, path, "hidden", default=[16, 16], minimum=1),
        "head": _validate_head(doc["head"]),
    }


def _validate_loss(doc, path="loss"):
    doc = _require_map(doc, path)
    _check_keys(
        doc, path, {"xent", "logistic", "spectral", "negatives", "population", "bias_reg"}
    )
    out = {
        lid: _get_real(doc, path, lid, default=0.0, minimum=0.0)
        for lid in LOSS_IDS
    }
    if all(out[lid] == 0.0 for lid in LOSS_IDS):
        _fail(path, "at least one loss weight must be positive")
    out["negatives"] = _get_int(doc, path, "negatives", default=8, minimum=1)
    out["population"] = _get_bool(doc, path, "population", False)
    out["bias_reg"] = _get_real(doc, path, "bias_reg", default=0.0, minimum=0.0)
    return out


def _validate_train(doc, path="train"):
    doc = _require_map(doc, path)
    _check_keys(doc, path, {"steps", "batch", "lr"})
    return {
        "steps": _get_int(doc, path, "steps", default=1000, minimum=0),
        "batch": _get_int(doc, path, "batch", default=256, minimum=1),
        "lr": _get_real(doc, path, "lr", default=3e-3, exclusive_min=0.0),
    }


def _validate_spectra(doc, path="spectra"):
    doc = _require_map(doc, path)
    _check_keys(doc, path, {"top", "landmark_fraction", "samples_per_latent"})
    top = doc.get("top")
    if top is not None:
        top = _get_int(doc, path, "top", minimum=1)
    frac = _get_real(doc, path, "landmark_fraction", default=1.0, exclusive_min=0.0)
    if frac > 1.0:
        _fail(f"{path}.landmark_fraction", f"must be <= 1.0, got {frac}")
    return {
        "top": top,
        "landmark_fraction": frac,
        "samples_per_latent": _get_int(
            doc, path, "samples_per_latent", default=256, minimum=1
        ),
    }


def _validate_neuralef(doc, path="neuralef"):
    doc = _require_map(doc, path)
    _check_keys(
        doc, path, {"n_outputs", "hidden", "steps", "batch", "lr", "mixture_weight"}
    )
    weight = _get_real(doc, path, "mixture_weight", default=0.5, minimum=0.0)
    if weight > 1.0:
        _fail(f"{path}.mixture_weight", f"must be <= 1.0, got {weight}")
    return {
        "n_outputs": _get_int(doc, path, "n_outputs", default=3, minimum=1),
        "hidden": _get_int_list(doc, path, "hidden", default=[32, 32], minimum=1),
        "steps": _get_int(doc, path, "steps", default=1500, minimum=1),
        "batch": _get_int(doc, path, "batch", default=512, minimum=2),
        "lr": _get_real(doc, path, "lr", default=3e-3, exclusive_min=0.0),
        "mixture_weight": weight,
    }


def _validate_analysis(doc, path="analysis"):
    doc = _require_map(doc, path)
    _check_keys(doc, path, {"minimax", "bound", "downstream", "minima", "assumption"})
    out = {}
    if "minimax" in doc:
        sub = _require_map(doc["minimax"], f"{path}.minimax")
        _check_keys(sub, f"{path}.minimax", {"d", "epsilon", "challengers"})
        out["minimax"] = {
            "d": _get_int(sub, f"{path}.minimax", "d", minimum=1),
            "epsilon": _get_real(
                sub, f"{path}.minimax", "epsilon", default=2.0, minimum=0.0
            ),
            "challengers": _get_int(
                sub, f"{path}.minimax", "challengers", default=1000, minimum=1
            ),
        }
    if "bound" in doc:
        sub = _require_map(doc["bound"], f"{path}.bound")
        _check_keys(
            sub,
            f"{path}.bound",
            {"coeffs", "d", "radius", "n", "trials", "noise_half_width"},
        )
        coeffs = sub.get("coeffs")
        if not isinstance(coeffs, list) or not coeffs or any(
            isinstance(c, bool) or not isinstance(c, (int, float)) for c in coeffs
        ):
            _fail(f"{path}.bound.coeffs", "expected a nonempty list of numbers")
        out["bound"] = {
            "coeffs": [float(c) for c in coeffs],
            "d": _get_int(sub, f"{path}.bound", "d", minimum=1),
            "radius": _get_real(sub, f"{path}.bound", "radius", minimum=0.0),
            "n": _get_int(sub, f"{path}.bound", "n", minimum=1),
            "trials": _get_int(sub, f"{path}.bound", "trials", default=100, minimum=1),
            "noise_half_width": _get_real(
                sub, f"{path}.bound", "noise_half_width", default=0.5,
                exclusive_min=0.0,
            ),
        }
    if "downstream" in doc:
        sub = _require_map(doc["downstream"], f"{path}.downstream")
        _check_keys(
            sub,
            f"{path}.downstream",
            {"n_train", "n_val", "n_test", "l2_grid", "d_grid"},
        )
        entry = {
            "n_train": _get_int(sub, f"{path}.downstream", "n_train", default=512, minimum=1),
            "n_val": _get_int(sub, f"{path}.downstream", "n_val", default=256, minimum=1),
            "n_test": _get_int(sub, f"{path}.downstream", "n_test", default=1024, minimum=1),
        }
        l2_grid = sub.get("l2_grid", [1e-4, 1e-2, 1.0])
        if not isinstance(l2_grid, list) or not l2_grid:
            _fail(f"{path}.downstream.l2_grid", "expected a nonempty list")
        entry["l2_grid"] = [
            _get_real({"v": v}, f"{path}.downstream.l2_grid", "v", minimum=0.0)
            for v in l2_grid
        ]
        d_grid = sub.get("d_grid")
        entry["d_grid"] = (
            None if d_grid is None
            else _get_int_list(sub, f"{path}.downstream", "d_grid", default=None, minimum=0)
        )
        out["downstream"] = entry
    if "minima" in doc:
        sub = _require_map(doc["minima"], f"{path}.minima")
        _check_keys(sub, f"{path}.minima", {"perturbations", "scale"})
        out["minima"] = {
            "perturbations": _get_int(
                sub, f"{path}.minima", "perturbations", default=100, minimum=1
            ),
            "scale": _get_real(
                sub, f"{path}.minima", "scale", default=0.3, exclusive_min=0.0
            ),
        }
    if "assumption" in doc:
        sub = _require_map(doc["assumption"], f"{path}.assumption")
        _check_keys(sub, f"{path}.assumption", {"trials"})
        out["assumption"] = {
            "trials": _get_int(
                sub, f"{path}.assumption", "trials", default=1000, minimum=1
            ),
        }
    return out


def validate_config(doc):
    """Validate a raw JSON document and fill defaults.

    Returns the normalized configuration dict. Raises ConfigError with
    the offending field path on the first violation.
    """
    doc = _require_map(doc, "")
    _check_keys(
        doc,
        "",
        {"seed", "out", "task", "model", "loss", "train", "spectra", "neuralef",
         "analysis"},
    )
    if "task" not in doc:
        _fail("task", "required")
    out = {
        "seed": _get_int(doc, "", "seed", default=0, minimum=0),
        "out": doc.get("out"),
        "task": _validate_task(doc["task"]),
        "model": _validate_model(doc["model"]) if "model" in doc else None,
        "loss": _validate_loss(doc.get("loss", {"spectral": 1.0})),
        "train": _validate_train(doc.get("train", {})),
        "spectra": _validate_spectra(doc.get("spectra", {})),
        "neuralef": _validate_neuralef(doc.get("neuralef", {})),
        "analysis": _validate_analysis(doc.get("analysis", {})),
    }
    if out["out"] is not None and not isinstance(out["out"], str):
        _fail("out", "expected a path string")
    return out


def load_config(path):
    """Read and validate a JSON config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON in {path}: {exc}") from exc
    return validate_config(doc)
