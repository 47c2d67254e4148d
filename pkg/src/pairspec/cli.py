"""Command-line pipelines over the library.

Each subcommand is a thin wrapper over module operations, reads one
validated JSON config, and writes its outputs plus a manifest of
content hashes under the output directory. Given the same config and
seed, outputs are byte-identical across runs and thread settings.
"""

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, config as configmod, contrastive as ct
from . import neuralef, numkit, pospair, report, spectra, tasklab
from .errors import ConfigError, PairspecError

MANIFEST_SCHEMA = 1


# ---------------------------------------------------------------------------
# Small deterministic writers
# ---------------------------------------------------------------------------


def _fmt(value):
    if isinstance(value, (np.floating, float)):
        return repr(float(value))
    return str(value)


def _write_csv(path, rows):
    """CSV with shortest round-trip decimals and no header."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row))
            fh.write("\n")
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if np.isfinite(value) else repr(value)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return _jsonable(dataclasses.asdict(obj))
    return obj


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_jsonable(doc), fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _config_digest(cfg):
    doc = {k: v for k, v in cfg.items() if k != "out"}
    blob = json.dumps(_jsonable(doc), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _write_manifest(out_dir, cfg, files):
    entries = {
        Path(p).relative_to(out_dir).as_posix(): _sha256(p) for p in files
    }
    doc = {
        "schema_version": MANIFEST_SCHEMA,
        "seed": cfg["seed"],
        "config_sha256": _config_digest(cfg),
        "files": dict(sorted(entries.items())),
    }
    return _write_json(out_dir / "manifest.json", doc)


# ---------------------------------------------------------------------------
# Config and environment plumbing
# ---------------------------------------------------------------------------


def _resolve_threads(value):
    if value is None:
        value = os.environ.get("PAIRSPEC_THREADS", "1")
    try:
        threads = int(value)
    except (TypeError, ValueError):
        raise ConfigError("threads", f"expected an integer, got {value!r}")
    if threads < 1:
        raise ConfigError("threads", f"must be >= 1, got {threads}")
    return threads


def _load_setup(args):
    if not args.config:
        raise ConfigError("config", "a --config file is required")
    cfg = configmod.load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if not cfg.get("out"):
        raise ConfigError("out", "an output directory is required")
    _resolve_threads(args.threads)  # stages run sequentially either way
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    return cfg, out_dir


def _build_task(cfg):
    spec = cfg["task"]
    rng = numkit.rng_stream(cfg["seed"], "task")
    if spec["kind"] == "chain":
        return tasklab.chain_task()
    if spec["kind"] == "regions":
        w, h = spec["grid"]
        return tasklab.gen_regions_task(w, h, spec["regions"])
    if spec["kind"] == "random":
        return tasklab.random_enumerated_task(
            spec["n_latents"], spec["n_views"], rng,
            concentration=spec["concentration"],
        )
    if spec["kind"] == "sprites":
        return tasklab.gen_sprite_task(
            spec["grid"], spec["classes"], spec["sprites_per_class"], rng,
            copies=spec["copies"], k=spec["k"],
        )
    try:
        return tasklab.load_task_json(spec["path"])
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigError("task.path", f"cannot load {spec['path']}: {exc}")


def _grid_shape(task):
    if task.enumerated and task.views.grid_shape is not None:
        return tuple(task.views.grid_shape)
    return None


# ---------------------------------------------------------------------------
# Pipeline stages (each returns the list of files it wrote)
# ---------------------------------------------------------------------------


def _stage_task(cfg, out_dir, task):
    stage = out_dir / "task"
    stage.mkdir(exist_ok=True)
    files = [tasklab.save_task_json(stage / "task.json", task)]
    if task.enumerated:
        op = pospair.build_exact(task)
        files.append(
            report.marginal_figure(
                op.p_a, stage / "marginal.png", grid_shape=_grid_shape(task)
            )
        )
    return files


def _stage_exact(cfg, out_dir, task, op, basis):
    stage = out_dir / "exact"
    stage.mkdir(exist_ok=True)
    files = [
        numkit.save_matrix_csv(stage / "kernel.csv", op.kernel),
        numkit.save_matrix_bin(stage / "kernel.bin", op.kernel),
        numkit.save_matrix_csv(stage / "sym.csv", op.sym),
        numkit.save_matrix_csv(stage / "transition.csv", op.transition),
        numkit.save_matrix_csv(stage / "eigenfunctions.csv", basis.functions),
        _write_csv(
            stage / "eigenvalues.csv",
            [(i, float(l)) for i, l in enumerate(basis.lambdas)],
        ),
        _write_csv(stage / "marginal.csv", [(i, float(p)) for i, p in enumerate(op.p_a)]),
    ]
    shape = _grid_shape(task)
    if shape is not None:
        top = min(basis.functions.shape[0], 8)
        files.append(
            report.eigenfunction_grid_figure(
                basis.functions[:top], shape, stage / "eigenfunctions.png"
            )
        )
    return files


def _stage_train(cfg, out_dir, task):
    if cfg["model"] is None:
        raise ConfigError("model", "required for the training stage")
    stage = out_dir / "train"
    stage.mkdir(exist_ok=True)
    rng = numkit.rng_stream(cfg["seed"], "model-init")
    head = ct.head_from_config(cfg["model"]["head"])
    feat_dim = tasklab.feature_dim(task)
    model = ct.build_model(feat_dim, cfg["model"]["hidden"], head, rng)
    spec = ct.LossSpec(**cfg["loss"])
    train_cfg = ct.TrainConfig(
        steps=cfg["train"]["steps"],
        batch=cfg["train"]["batch"],
        lr=cfg["train"]["lr"],
        seed=cfg["seed"],
    )
    result = ct.train(task, model, spec, train_cfg)
    files = [
        ct.save_checkpoint(
            stage / "checkpoint.bin", model, feat_dim,
            meta={"head": cfg["model"]["head"]},
        ),
        _write_csv(
            stage / "curve.csv",
            [
                (s, total, *(parts[k] for k in sorted(parts)))
                for s, total, parts in result.curve
            ],
        ),
    ]
    if result.curve:
        files.append(report.loss_curve_figure(result.curve, stage / "curve.png"))
    if task.enumerated:
        gram = model.kernel_matrix(task.views.features)
        files.append(numkit.save_matrix_csv(stage / "learned_kernel.csv", gram))
    return files, model


def _learned_kernel_fn(task, model):
    def kernel_fn(v1, v2):
        f1 = tasklab.view_features(task, [v1])
        f2 = tasklab.view_features(task, [v2])
        e1, e2 = model.embed(f1), model.embed(f2)
        return float(model.head.cross(e1, e2).value[0, 0])

    return kernel_fn


def _kpca_sample(cfg, task):
    # Enumerated tasks use the full population; multiset tasks use a fixed
    # number of draws per latent, weighted back to the view marginal.
    if task.enumerated:
        return list(range(task.views.count)), tasklab.marginals(task)
    per = cfg["spectra"]["samples_per_latent"]
    rng = numkit.rng_stream(cfg["seed"], "kpca-sample")
    views, weights = [], []
    for z in range(task.n_latents):
        for _ in range(per):
            views.append(tasklab.sample_view_given(task, z, rng))
            weights.append(task.p_z[z] / per)
    return views, np.array(weights)


def _stage_kpca(cfg, out_dir, task, model):
    stage = out_dir / "kpca"
    stage.mkdir(exist_ok=True)
    views, weights = _kpca_sample(cfg, task)
    if model is not None:
        kernel_fn = _learned_kernel_fn(task, model)
    else:
        kernel_fn = lambda v1, v2: pospair.kernel_eval(task, v1, v2)
    pca = spectra.kpca_from_kernel(
        kernel_fn, views, weights, top=cfg["spectra"]["top"]
    )
    files = [
        _write_csv(
            stage / "variances.csv",
            [(i, float(v)) for i, v in enumerate(pca.variances)],
        ),
        numkit.save_matrix_csv(stage / "projections.csv", pca.projections),
    ]
    frac = cfg["spectra"]["landmark_fraction"]
    if frac < 1.0:
        n_land = max(1, int(round(frac * len(views))))
        land_rng = numkit.rng_stream(cfg["seed"], "landmarks")
        picked = sorted(
            land_rng.choice(len(views), size=n_land, replace=False).tolist()
        )
        landmarks = [views[i] for i in picked]
        ny = spectra.nystrom_map(kernel_fn, landmarks)
        approx = ny.gram(views)
        exact = np.array([[kernel_fn(i, j) for j in views] for i in views])
        scale = np.linalg.norm(exact)
        err = float(np.linalg.norm(approx - exact) / (scale or 1.0))
        files.append(
            _write_json(
                stage / "nystrom.json",
                {"landmarks": picked, "relative_error": err},
            )
        )
    return files, pca


def _stage_align(cfg, out_dir, op, basis, pca):
    stage = out_dir / "align"
    stage.mkdir(exist_ok=True)
    align = spectra.alignment_matrix(pca.projections, basis.functions, op.p_a)
    discs = np.array(
        [pospair.discrepancy(op, f) for f in basis.functions]
    )
    files = [
        numkit.save_matrix_csv(stage / "alignment.csv", align),
        report.alignment_heatmap(align, stage / "alignment.png"),
        _write_csv(
            stage / "lambda_disc.csv",
            [
                (float(l), float(d))
                for l, d in zip(basis.lambdas, discs)
            ],
        ),
        report.eigenvalue_discrepancy_scatter(
            basis.lambdas, discs, stage / "lambda_disc.png"
        ),
    ]
    return files


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def _cmd_task(args):
    if args.action != "gen":
        raise ConfigError("task", f"unknown action {args.action!r}")
    cfg, out_dir = _load_setup(args)
    task = _build_task(cfg)
    files = _stage_task(cfg, out_dir, task)
    _write_manifest(out_dir, cfg, files)
    return 0


def _cmd_exact(args):
    cfg, out_dir = _load_setup(args)
    task = _build_task(cfg)
    op = pospair.build_exact(task)
    basis = spectra.exact_eigenbasis(op)
    files = _stage_exact(cfg, out_dir, task, op, basis)
    _write_manifest(out_dir, cfg, files)
    return 0


def _cmd_train(args):
    cfg, out_dir = _load_setup(args)
    task = _build_task(cfg)
    files, _ = _stage_train(cfg, out_dir, task)
    _write_manifest(out_dir, cfg, files)
    return 0


def _load_model_if_any(out_dir):
    path = out_dir / "train" / "checkpoint.bin"
    if path.exists():
        model, _ = ct.load_checkpoint(path)
        return model
    return None


def _cmd_kpca(args):
    cfg, out_dir = _load_setup(args)
    task = _build_task(cfg)
    model = _load_model_if_any(out_dir)
    files, _ = _stage_kpca(cfg, out_dir, task, model)
    _write_manifest(out_dir, cfg, files)
    return 0


def _cmd_align(args):
    cfg, out_dir = _load_setup(args)
    task = _build_task(cfg)
    op = pospair.build_exact(task)
    basis = spectra.exact_eigenbasis(op)
    model = _load_model_if_any(out_dir)
    kpca_files, pca = _stage_kpca(cfg, out_dir, task, model)
    files = kpca_files + _stage_align(cfg, out_dir, op, basis, pca)
    _write_manifest(out_dir, cfg, files)
    return 0


def _cmd_neuralef(args):
    cfg, out_dir = _load_setup(args)
    task = _build_task(cfg)
    nef_cfg = neuralef.NefConfig(
        n_outputs=cfg["neuralef"]["n_outputs"],
        hidden=tuple(cfg["neuralef"]["hidden"]),
        steps=cfg["neuralef"]["steps"],
        batch=cfg["neuralef"]["batch"],
        lr=cfg["neuralef"]["lr"],
        seed=cfg["seed"],
        mixture_weight=cfg["neuralef"]["mixture_weight"],
    )
    result = neuralef.nef_train(task, nef_cfg)
    stage = out_dir / "neuralef"
    stage.mkdir(exist_ok=True)
    files = [
        _write_csv(
            stage / "eigenvalue_estimates.csv",
            [(i, float(v)) for i, v in enumerate(result.eigenvalue_estimates)],
        ),
        _write_csv(stage / "curve.csv", result.curve),
    ]
    if task.enumerated:
        funcs = result.functions(task.views.features)
        files.append(
            numkit.save_matrix_csv(stage / "functions.csv", funcs.T)
        )
        op = pospair.build_exact(task)
        basis = spectra.exact_eigenbasis(op)
        align = spectra.alignment_matrix(
            funcs.T, basis.functions[: funcs.shape[1]], op.p_a
        )
        files.append(
            report.alignment_heatmap(align, stage / "alignment.png")
        )
    _write_manifest(out_dir, cfg, files)
    return 0


def _cmd_minimax(args):
    cfg, out_dir = _load_setup(args)
    opts = cfg["analysis"].get("minimax")
    if opts is None:
        raise ConfigError("analysis.minimax", "required for this subcommand")
    task = _build_task(cfg)
    op = pospair.build_exact(task)
    rng = numkit.rng_stream(cfg["seed"], "minimax")
    rep = analysis.minimax_verify(
        op, opts["d"], opts["epsilon"], challengers=opts["challengers"], rng=rng
    )
    doc = _jsonable(rep)
    doc["eigen_beats_all"] = rep.eigen_beats_all
    files = [_write_json(out_dir / "minimax.json", doc)]
    _write_manifest(out_dir, cfg, files)
    return 0


def _cmd_bound(args):
    cfg, out_dir = _load_setup(args)
    opts = cfg["analysis"].get("bound")
    if opts is None:
        raise ConfigError("analysis.bound", "required for this subcommand")
    task = _build_task(cfg)
    rng = numkit.rng_stream(cfg["seed"], "gen-bound")
    rep = analysis.gen_bound_check(
        task, opts["coeffs"], d=opts["d"], radius=opts["radius"], n=opts["n"],
        trials=opts["trials"], noise_half_width=opts["noise_half_width"],
        rng=rng,
    )
    doc = _jsonable(rep)
    doc["mean_excess"] = rep.mean_excess
    doc["holds"] = rep.holds
    files = [_write_json(out_dir / "bound.json", doc)]
    _write_manifest(out_dir, cfg, files)
    return 0


def _cmd_verify_minima(args):
    cfg, out_dir = _load_setup(args)
    opts = cfg["analysis"].get("minima", {"perturbations": 100, "scale": 0.3})
    task = _build_task(cfg)
    rng = numkit.rng_stream(cfg["seed"], "loss-minima")
    reports = {}
    for loss_id in configmod.LOSS_IDS:
        rep = analysis.loss_minimum_verify(
            task, loss_id, perturbations=opts["perturbations"],
            scale=opts["scale"], rng=rng,
        )
        doc = _jsonable(rep)
        doc["minimizer_wins"] = rep.minimizer_wins
        reports[loss_id] = doc
    files = [_write_json(out_dir / "minima.json", reports)]
    _write_manifest(out_dir, cfg, files)
    return 0


def _cmd_downstream(args):
    cfg, out_dir = _load_setup(args)
    opts = cfg["analysis"].get(
        "downstream",
        {"n_train": 512, "n_val": 256, "n_test": 1024,
         "l2_grid": [1e-4, 1e-2, 1.0], "d_grid": None},
    )
    task = _build_task(cfg)
    op = pospair.build_exact(task)
    basis = spectra.exact_eigenbasis(op)
    top = cfg["spectra"]["top"] or basis.functions.shape[0]
    rng = numkit.rng_stream(cfg["seed"], "downstream")
    rep = analysis.downstream_eval(
        task, basis.functions[:top].T,
        n_train=opts["n_train"], n_val=opts["n_val"], n_test=opts["n_test"],
        l2_grid=tuple(opts["l2_grid"]),
        d_grid=opts["d_grid"], rng=rng,
    )
    files = [_write_json(out_dir / "downstream.json", _jsonable(rep))]
    _write_manifest(out_dir, cfg, files)
    return 0


def _cmd_chain(args):
    cfg, out_dir = _load_setup(args)
    task = _build_task(cfg)
    op = pospair.build_exact(task)
    basis = spectra.exact_eigenbasis(op)
    rng = numkit.rng_stream(cfg["seed"], "chain")
    n_funcs = min(basis.functions.shape[0], 4)
    rows = []
    values = np.zeros((args.chains, args.steps + 1, n_funcs))
    for c in range(args.chains):
        start = int(rng.choice(op.n_views, p=op.p_a))
        walk = tasklab.sample_chain(task, start, args.steps, rng)
        for t, (view, _) in enumerate(walk):
            values[c, t] = basis.functions[:n_funcs, view]
            rows.append((c, t, view, *[float(v) for v in values[c, t]]))
    stage = out_dir / "chain"
    stage.mkdir(exist_ok=True)
    files = [
        _write_csv(stage / "trajectories.csv", rows),
        report.chain_trajectory_figure(values, stage / "trajectories.png"),
    ]
    _write_manifest(out_dir, cfg, files)
    return 0


def _cmd_run(args):
    cfg, out_dir = _load_setup(args)
    stages = []

    def run_stage(name, fn):
        try:
            return fn()
        except ConfigError:
            raise
        except PairspecError as exc:
            raise PairspecError(f"stage {name}: {exc}") from exc

    task = run_stage("task", lambda: _build_task(cfg))
    files = run_stage("task", lambda: _stage_task(cfg, out_dir, task))
    stages.extend(files)
    op = run_stage("exact", lambda: pospair.build_exact(task))
    basis = run_stage("exact", lambda: spectra.exact_eigenbasis(op))
    stages.extend(run_stage(
        "exact", lambda: _stage_exact(cfg, out_dir, task, op, basis)
    ))
    train_files, model = run_stage(
        "train", lambda: _stage_train(cfg, out_dir, task)
    )
    stages.extend(train_files)
    kpca_files, pca = run_stage(
        "kpca", lambda: _stage_kpca(cfg, out_dir, task, model)
    )
    stages.extend(kpca_files)
    stages.extend(run_stage(
        "align", lambda: _stage_align(cfg, out_dir, op, basis, pca)
    ))
    _write_manifest(out_dir, cfg, stages)
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _add_common(parser):
    parser.add_argument("--config", required=False, help="JSON config path")
    parser.add_argument("--seed", type=int, default=None, help="seed override")
    parser.add_argument(
        "--threads", default=None,
        help="worker count (results are thread-count invariant)",
    )
    parser.add_argument("--out", default=None, help="output directory override")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pairspec",
        description="exact spectral analysis of contrastive pair kernels",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_task = sub.add_parser("task", help="task construction")
    p_task.add_argument("action", choices=["gen"])
    _add_common(p_task)
    p_task.set_defaults(fn=_cmd_task)

    for name, fn in [
        ("exact", _cmd_exact),
        ("train", _cmd_train),
        ("kpca", _cmd_kpca),
        ("align", _cmd_align),
        ("neuralef", _cmd_neuralef),
        ("minimax", _cmd_minimax),
        ("bound", _cmd_bound),
        ("verify-minima", _cmd_verify_minima),
        ("downstream", _cmd_downstream),
        ("run", _cmd_run),
    ]:
        p = sub.add_parser(name)
        _add_common(p)
        p.set_defaults(fn=fn)

    p_chain = sub.add_parser("chain", help="sample augmentation-chain walks")
    p_chain.add_argument("--chains", type=int, default=5)
    p_chain.add_argument("--steps", type=int, default=50)
    _add_common(p_chain)
    p_chain.set_defaults(fn=_cmd_chain)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except PairspecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
