"""Config-driven experiment runner and analytic self-check suite.

Commands: `tiltlab run <config.json> [--seed N] [--output-dir D]` and
`tiltlab verify`. All outputs are plot-ready CSV/JSON; a fixed config and
seed reproduce them byte for byte (nothing time- or locale-dependent is
written). Config problems exit with status 2 before anything is written;
runtime failures exit 1.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys

import numpy as np

from . import crossmodal, datagen, encoders, gaussian, linalg, losses, training
from .errors import ConfigError, TiltlabError
from .rng import SeededRng

EXPERIMENTS = ("closed-form", "gaussian2d", "gaussian-gp", "mnist", "lagrangian")


# ---------------------------------------------------------------------------
# config loading


def _require(doc: dict, key: str, path: str):
    if key not in doc:
        raise ConfigError(f"{path}.{key}: missing required field")
    return doc[key]


def _as_int(value, path: str, minimum=None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{path}: must be >= {minimum}")
    return value


def _as_number(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    return float(value)


def _as_matrix(value, path: str) -> np.ndarray:
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: not a numeric matrix ({exc})") from exc
    if arr.ndim != 2:
        raise ConfigError(f"{path}: expected a 2-d matrix")
    return arr


def _int_list(doc: dict, key: str, path: str, default: list) -> list:
    raw = doc.get(key, default)
    if not isinstance(raw, list) or not raw:
        raise ConfigError(f"{path}.{key}: expected a nonempty list")
    return [_as_int(x, f"{path}.{key}[{i}]", minimum=1) for i, x in enumerate(raw)]


def _build_loss(doc, path: str) -> losses.LossKind:
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object")
    variant = _require(doc, "variant", path)
    kernel = None
    if "kernel" in doc:
        kdoc = doc["kernel"]
        try:
            kernel = losses.Kernel(
                family=_require(kdoc, "family", f"{path}.kernel"),
                bandwidth=_as_number(kdoc.get("bandwidth", 1.0), f"{path}.kernel.bandwidth"),
                degree=_as_int(kdoc.get("degree", 2), f"{path}.kernel.degree", minimum=1),
                offset=_as_number(kdoc.get("offset", 1.0), f"{path}.kernel.offset"),
            )
        except ValueError as exc:
            raise ConfigError(f"{path}.kernel: {exc}") from exc
    try:
        return losses.LossKind(
            variant=variant,
            lam_u=_as_number(doc.get("lam_u", 1.0), f"{path}.lam_u"),
            lam_v=_as_number(doc.get("lam_v", 1.0), f"{path}.lam_v"),
            kernel=kernel,
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _build_train(doc, seed: int, path: str) -> training.TrainConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object")
    try:
        return training.TrainConfig(
            seed=seed,
            epochs=_as_int(_require(doc, "epochs", path), f"{path}.epochs", minimum=1),
            batch_size=_as_int(_require(doc, "batch_size", path), f"{path}.batch_size", minimum=2),
            learning_rate=_as_number(_require(doc, "learning_rate", path), f"{path}.learning_rate"),
            tau=_as_number(doc.get("tau", 1.0), f"{path}.tau"),
            loss=_build_loss(_require(doc, "loss", path), f"{path}.loss"),
            tilting=doc.get("tilting", encoders.TILTING_INNER),
        )
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


class RunPlan:
    """Validated config, ready to execute."""

    def __init__(self, doc: dict, seed_override, outdir_override):
        if not isinstance(doc, dict):
            raise ConfigError("top level: expected a JSON object")
        self.experiment = _require(doc, "experiment", "config")
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"config.experiment: unknown experiment {self.experiment!r}")
        seed = seed_override if seed_override is not None else _require(doc, "seed", "config")
        self.seed = _as_int(seed, "config.seed", minimum=0)
        outdir = outdir_override or doc.get("output_dir")
        if not outdir:
            raise ConfigError("config.output_dir: missing (or pass --output-dir)")
        self.output_dir = str(outdir)
        self.sweep = {
            "embedding_dims": _int_list(doc.get("sweep", {}), "embedding_dims", "config.sweep", [1]),
            "batch_sizes": _int_list(doc.get("sweep", {}), "batch_sizes", "config.sweep", [64]),
            "sample_sizes": _int_list(doc.get("sweep", {}), "sample_sizes", "config.sweep", [2000]),
        }

        gdoc = doc.get("gaussian", {"c_uu": [[1.5]], "c_uv": [[1.0]], "c_vv": [[1.5]]})
        try:
            self.blocks = gaussian.BlockGaussian(
                _as_matrix(_require(gdoc, "c_uu", "config.gaussian"), "config.gaussian.c_uu"),
                _as_matrix(_require(gdoc, "c_uv", "config.gaussian"), "config.gaussian.c_uv"),
                _as_matrix(_require(gdoc, "c_vv", "config.gaussian"), "config.gaussian.c_vv"),
            )
        except (ValueError, TiltlabError) as exc:
            raise ConfigError(f"config.gaussian: {exc}") from exc

        self.train = None
        if self.experiment != "closed-form":
            self.train = _build_train(_require(doc, "train", "config"), self.seed, "config.train")

        if self.experiment == "gaussian-gp":
            gp = doc.get("gp", {})
            try:
                self.gp = datagen.GpConfig(
                    tau_inv_length=_as_number(gp.get("tau_inv_length", 3.0), "config.gp.tau_inv_length"),
                    alpha=_as_number(gp.get("alpha", 2.0), "config.gp.alpha"),
                    n_modes=_as_int(gp.get("n_modes", 1000), "config.gp.n_modes", minimum=1),
                    grid_points=_as_int(gp.get("grid_points", 12), "config.gp.grid_points", minimum=1),
                    noise_sigma=_as_number(gp.get("noise_sigma", 0.05), "config.gp.noise_sigma"),
                    n_coeffs=_as_int(gp.get("n_coeffs", 5), "config.gp.n_coeffs", minimum=1),
                )
            except ValueError as exc:
                raise ConfigError(f"config.gp: {exc}") from exc

        if self.experiment == "lagrangian":
            flow = doc.get("flow", {})
            self.flow_m = _as_int(flow.get("m", 1), "config.flow.m", minimum=0)
            self.flow_dt = _as_number(flow.get("dt", 1e-3), "config.flow.dt")
            self.flow_t_final = _as_number(flow.get("t_final", 0.5), "config.flow.t_final")
            self.flow_stride = _as_int(flow.get("record_stride", 10), "config.flow.record_stride", minimum=1)
            self.flow_x0 = tuple(flow.get("x0", (0.5, 0.5)))
            self.heldout = _as_int(doc.get("heldout", 500), "config.heldout", minimum=1)
            self.hidden = _as_int(doc.get("hidden", 256), "config.hidden", minimum=1)
            try:
                datagen.FlowConfig(
                    m=self.flow_m,
                    omega=tuple(np.zeros((2 * self.flow_m + 1) ** 2)),
                    x0=self.flow_x0,
                    dt=self.flow_dt,
                    t_final=self.flow_t_final,
                    record_stride=self.flow_stride,
                )
            except ValueError as exc:
                raise ConfigError(f"config.flow: {exc}") from exc

        if self.experiment == "mnist":
            m = doc.get("mnist", {})
            self.mnist_paths = {
                k: m.get(k)
                for k in ("images", "labels", "test_images", "test_labels")
            }
            self.hidden = _as_int(doc.get("hidden", 128), "config.hidden", minimum=1)

        self.echo = {k: v for k, v in doc.items() if k != "output_dir"}
        self.echo["seed"] = self.seed


def load_plan(config_path, seed_override=None, outdir_override=None) -> RunPlan:
    try:
        with open(config_path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"{config_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{config_path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return RunPlan(doc, seed_override, outdir_override)


# ---------------------------------------------------------------------------
# output helpers


def _config_hash(echo: dict) -> str:
    blob = json.dumps(echo, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _write_csv(plan: RunPlan, name: str, header: list, rows: list):
    path = os.path.join(plan.output_dir, name + ".csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(
                [f"{x:.17g}" if isinstance(x, float) else x for x in row]
            )
    meta_path = os.path.join(plan.output_dir, name + ".meta.json")
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(
            {"experiment": plan.experiment, "config_hash": _config_hash(plan.echo), "columns": header},
            fh,
            sort_keys=True,
        )
    return name + ".csv"


def _write_report(plan: RunPlan, results: dict, artifacts: list):
    path = os.path.join(plan.output_dir, "report.json")
    doc = {
        "experiment": plan.experiment,
        "config": plan.echo,
        "config_hash": _config_hash(plan.echo),
        "results": results,
        "artifacts": artifacts,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)


def _matrix_rows(name: str, m: np.ndarray):
    m = np.atleast_2d(m)
    return [
        (name, i, j, float(m[i, j]))
        for i in range(m.shape[0])
        for j in range(m.shape[1])
    ]


# ---------------------------------------------------------------------------
# experiments


def _linear_pair_inits(n_x: int, n_y: int, n_e: int, seed: int, tag: int):
    root = SeededRng(seed)
    spec_u = encoders.linear_spec(n_x, n_e)
    spec_v = encoders.linear_spec(n_y, n_e)
    init_u = encoders.init_params(spec_u, root.split(10, tag, 0))
    init_v = encoders.init_params(spec_v, root.split(10, tag, 1))
    return spec_u, spec_v, init_u, init_v


def _trained_tilt_matrix(spec_u, params_u, spec_v, params_v) -> np.ndarray:
    g = params_u.unflatten()["w0"]
    h = params_v.unflatten()["w0"]
    return g.T @ h


def _run_closed_form(plan: RunPlan):
    g = plan.blocks
    cond = gaussian.conditional_u_given_v(g)
    a_cond = gaussian.minimizer_cond(g)
    quad = gaussian.minimizer_quadratic_onesided(g)
    a_joint = gaussian.minimizer_joint(g)
    quad_cond = gaussian.model_conditional(quad, "u_given_v", g)
    sing = np.linalg.svd(
        linalg.inv_sym_sqrt(g.c_uu) @ g.c_uv @ linalg.inv_sym_sqrt(g.c_vv), compute_uv=False
    )
    results = {
        "true_gain": linalg.matrix_to_json(cond.gain),
        "true_cov": linalg.matrix_to_json(cond.cov),
        "a_cond": linalg.matrix_to_json(a_cond),
        "a_quad": linalg.matrix_to_json(quad.a),
        "b_quad": linalg.matrix_to_json(quad.b),
        "a_joint": linalg.matrix_to_json(a_joint),
        "quad_model_gain": linalg.matrix_to_json(quad_cond.gain),
        "quad_model_cov": linalg.matrix_to_json(quad_cond.cov),
        "whitened_singular_values": sing.tolist(),
        "shrunk_singular_values": np.atleast_1d(gaussian.shrinkage_h(sing)).tolist(),
        "cond_loss_at_min": gaussian.cond_loss_closed(a_cond, g),
        "joint_loss_at_min": gaussian.joint_loss_closed(a_joint, g),
        "marginal_model_cond": linalg.matrix_to_json(gaussian.model_marginal_u(a_cond, g)),
        "marginal_model_joint": linalg.matrix_to_json(gaussian.model_marginal_u(a_joint, g)),
    }
    rows = []
    for name in ("true_gain", "true_cov", "a_cond", "a_quad", "b_quad", "a_joint"):
        m = results[name]
        rows.extend(
            _matrix_rows(name, np.asarray(m["data"]).reshape(m["rows"], m["cols"]))
        )
    artifacts = [_write_csv(plan, "closed_form", ["quantity", "row", "col", "value"], rows)]
    _write_report(plan, results, artifacts)


def _gaussian_density(cov: np.ndarray, pts: np.ndarray) -> np.ndarray:
    prec = linalg.inv_pd(cov)
    quad = np.einsum("ni,ij,nj->n", pts, prec, pts)
    norm = 1.0 / (2.0 * np.pi * np.sqrt(np.linalg.det(cov)))
    return norm * np.exp(-0.5 * quad)


def _run_gaussian2d(plan: RunPlan):
    g = plan.blocks
    if g.n_x != 1 or g.n_y != 1:
        raise ConfigError("config.gaussian: gaussian2d expects 1-d u and v blocks")
    a_cond = gaussian.minimizer_cond(g)
    a_joint = gaussian.minimizer_joint(g)
    quad = gaussian.minimizer_quadratic_onesided(g)
    variants = {
        "cond": gaussian.model_conditional(gaussian.CosineLinear(a_cond), "u_given_v", g),
        "joint": gaussian.model_conditional(gaussian.CosineLinear(a_joint), "u_given_v", g),
        "quad": gaussian.model_conditional(quad, "u_given_v", g),
    }
    rows = []
    for name, cm in variants.items():
        rows.extend(_matrix_rows(f"{name}_gain", cm.gain))
        rows.extend(_matrix_rows(f"{name}_cov", cm.cov))
    artifacts = [_write_csv(plan, "conditionals", ["quantity", "row", "col", "value"], rows)]

    # joint density grids: true vs the three tilted models
    grid = np.linspace(-4.0, 4.0, 81)
    uu, vv = np.meshgrid(grid, grid, indexing="ij")
    pts = np.column_stack([uu.ravel(), vv.ravel()])
    covs = {
        "true": g.joint(),
        "cond": gaussian.model_joint(gaussian.CosineLinear(a_cond), g),
        "joint": gaussian.model_joint(gaussian.CosineLinear(a_joint), g),
        "quad": gaussian.model_joint(quad, g),
    }
    dens = {name: _gaussian_density(cov, pts) for name, cov in covs.items()}
    density_rows = [
        (
            float(pts[i, 0]),
            float(pts[i, 1]),
            float(dens["true"][i]),
            float(dens["cond"][i]),
            float(dens["joint"][i]),
            float(dens["quad"][i]),
        )
        for i in range(pts.shape[0])
    ]
    artifacts.append(
        _write_csv(
            plan,
            "densities",
            ["u", "v", "density_true", "density_cond_model", "density_joint_model", "density_quad_model"],
            density_rows,
        )
    )

    # one training run against the closed form
    n = plan.sweep["sample_sizes"][0]
    data = datagen.sample_block_gaussian(g, n, SeededRng(plan.seed).split(1))
    spec_u, spec_v, init_u, init_v = _linear_pair_inits(1, 1, 1, plan.seed, 0)
    params_u, params_v, history = training.train(plan.train, data, spec_u, spec_v, init_u, init_v)
    a_hat = _trained_tilt_matrix(spec_u, params_u, spec_v, params_v) / plan.train.tau
    history.to_csv(os.path.join(plan.output_dir, "training.csv"))
    artifacts.append("training.csv")
    results = {
        "a_cond": float(a_cond[0, 0]),
        "a_joint": float(a_joint[0, 0]),
        "a_quad": float(quad.a[0, 0]),
        "b_quad": float(quad.b[0, 0]),
        "a_trained": float(a_hat[0, 0]),
        "trained_abs_err": abs(float(a_hat[0, 0]) - float(a_cond[0, 0])),
        "final_epoch_loss": history.losses[-1],
    }
    _write_report(plan, results, artifacts)


def _run_gaussian_gp(plan: RunPlan):
    blocks = datagen.gp_analytic_blocks(plan.gp)
    true_gain = gaussian.conditional_u_given_v(blocks).gain
    root = SeededRng(plan.seed)
    v_eval = root.split(4).standard_normal((1000, plan.gp.n_coeffs))
    rows = []
    results = []
    idx = 0
    for n in plan.sweep["sample_sizes"]:
        for batch in plan.sweep["batch_sizes"]:
            for n_e in plan.sweep["embedding_dims"]:
                data = datagen.gp_modality_pair(plan.gp, n, root.split(1, idx))
                cfg = training.TrainConfig(
                    seed=plan.seed,
                    epochs=plan.train.epochs,
                    batch_size=batch,
                    learning_rate=plan.train.learning_rate,
                    tau=plan.train.tau,
                    loss=plan.train.loss,
                    tilting=plan.train.tilting,
                )
                spec_u, spec_v, init_u, init_v = _linear_pair_inits(
                    plan.gp.grid_points, plan.gp.n_coeffs, n_e, plan.seed, idx
                )
                params_u, params_v, _ = training.train(cfg, data, spec_u, spec_v, init_u, init_v)
                a_hat = _trained_tilt_matrix(spec_u, params_u, spec_v, params_v) / plan.train.tau
                model_gain = blocks.c_uu @ a_hat
                err = (model_gain - true_gain) @ v_eval.T
                mse = float(np.mean(np.sum(err**2, axis=0)))
                emp = gaussian.empirical_block_gaussian(data)
                a_closed = gaussian.minimizer_cond(emp, r=min(n_e, emp.n_x, emp.n_y))
                denom = float(np.linalg.norm(a_closed))
                frob = float(np.linalg.norm(a_hat - a_closed)) / denom if denom else float("nan")
                rows.append((n, batch, n_e, mse, frob))
                results.append(
                    {"n": n, "batch": batch, "n_e": n_e, "mse": mse, "frob_rel_err": frob}
                )
                idx += 1
    artifacts = [
        _write_csv(
            plan,
            "gp_sweep",
            ["n_samples", "batch_size", "n_e", "cond_mean_mse", "frob_rel_err_vs_rank_opt"],
            rows,
        )
    ]
    _write_report(plan, {"sweep": results}, artifacts)


def _run_mnist(plan: RunPlan):
    paths = plan.mnist_paths
    if not paths.get("images") or not paths.get("labels"):
        raise ConfigError("config.mnist: images and labels paths are required")
    missing = [
        p for p in (paths["images"], paths["labels"]) if not os.path.exists(p)
    ]
    if missing:
        # dataset files are inputs, not part of the build; note and bow out
        _write_report(plan, {"skipped": f"missing MNIST files: {missing}"}, [])
        print(f"mnist: skipped (missing files: {missing})")
        return
    images, labels = datagen.mnist_load(paths["images"], paths["labels"])
    if paths.get("test_images") and os.path.exists(paths["test_images"]):
        test_images, test_labels = datagen.mnist_load(paths["test_images"], paths["test_labels"])
    else:
        split = max(1, images.shape[0] // 6)
        test_images, test_labels = images[-split:], labels[-split:]
        images, labels = images[:-split], labels[:-split]

    # labels ride in the u slot (one-hot, frozen) so the u-given-v side of
    # the conditional loss is exactly label cross-entropy given the image
    data = datagen.PairedDataset(
        u=labels[:, None].astype(np.float64), v=images, meta={"generator": "mnist"}
    )
    spec_u = encoders.one_hot_spec(10)
    spec_v = encoders.mlp_spec([images.shape[1], plan.hidden, 10], activation="relu")
    init_u = encoders.init_params(spec_u, SeededRng(plan.seed).split(10, 1))
    init_v = encoders.init_params(spec_v, SeededRng(plan.seed).split(10, 0))

    def accuracy(params_v) -> float:
        correct = 0
        for start in range(0, test_images.shape[0], 1024):
            chunk = test_images[start : start + 1024]
            logits = encoders.encode(spec_v, params_v, chunk)
            correct += int(np.sum(np.argmax(logits, axis=1) == test_labels[start : start + 1024]))
        return correct / test_images.shape[0]

    def probe(epoch, pu, pv):
        return {"heldout_accuracy": accuracy(pv)}

    params_u, params_v, history = training.train(
        plan.train, data, spec_u, spec_v, init_u, init_v, probe=probe
    )
    history.to_csv(os.path.join(plan.output_dir, "accuracy.csv"))
    artifacts = ["accuracy.csv"]

    logits = encoders.encode(spec_v, params_v, test_images[:20]) / plan.train.tau
    counts = np.bincount(labels, minlength=10)
    with np.errstate(divide="ignore"):
        log_pi = np.log(counts / labels.size)
    probs = np.exp(
        logits + log_pi - np.max(logits + log_pi, axis=1, keepdims=True)
    )
    probs /= probs.sum(axis=1, keepdims=True)
    prob_rows = [
        (i, int(test_labels[i]), *[float(p) for p in probs[i]]) for i in range(probs.shape[0])
    ]
    artifacts.append(
        _write_csv(
            plan,
            "label_probs",
            ["image_index", "true_label", *[f"p{g}" for g in range(10)]],
            prob_rows,
        )
    )

    # highest-weight training images per label: softmax over images of the
    # class logit (the empirical conditional of images given the label)
    train_logits = np.vstack(
        [
            encoders.encode(spec_v, params_v, images[s : s + 1024])
            for s in range(0, images.shape[0], 1024)
        ]
    ) / plan.train.tau
    top_rows = []
    for label in range(10):
        order = np.argsort(-train_logits[:, label], kind="stable")[:5]
        for rank, i in enumerate(order, start=1):
            top_rows.append((label, rank, int(i), float(train_logits[i, label])))
    artifacts.append(
        _write_csv(plan, "top5_per_label", ["label", "rank", "image_index", "score"], top_rows)
    )
    _write_report(
        plan,
        {
            "final_heldout_accuracy": history.metrics[-1]["heldout_accuracy"],
            "final_epoch_loss": history.losses[-1],
            "n_train": int(images.shape[0]),
            "n_test": int(test_images.shape[0]),
        },
        artifacts,
    )


def torus_trajectory_features(v: np.ndarray) -> np.ndarray:
    """Smooth chart for torus-valued trajectories: cos/sin of the angle per
    recorded coordinate plus wrapped step displacements. Raw [0, 1) positions
    have mod-1 cliffs that a dense encoder cannot interpolate across."""
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    pos = v.reshape(v.shape[0], -1, 2)
    ang = 2.0 * np.pi * pos
    disp = ((np.diff(pos, axis=1) + 0.5) % 1.0) - 0.5
    return np.concatenate(
        [
            np.cos(ang).reshape(v.shape[0], -1),
            np.sin(ang).reshape(v.shape[0], -1),
            disp.reshape(v.shape[0], -1),
        ],
        axis=1,
    )


def _run_lagrangian(plan: RunPlan):
    root = SeededRng(plan.seed)
    flow = datagen.draw_flow_config(
        plan.flow_m,
        root.split(2),
        x0=plan.flow_x0,
        dt=plan.flow_dt,
        t_final=plan.flow_t_final,
        record_stride=plan.flow_stride,
    )
    n_train = plan.sweep["sample_sizes"][0]
    n_total = n_train + plan.heldout
    data = datagen.lagrangian_dataset(flow, n_total, root.split(3))
    coeff_dim = data.u.shape[1]
    feats = torus_trajectory_features(data.v)

    # cosine embeddings on both sides: the coefficient table is frozen
    # (identity up to normalization), only the trajectory encoder learns
    spec_u = encoders.frozen_table_spec(n_total, coeff_dim, normalized=True)
    params_u = encoders.params_from_table(spec_u, data.u)
    spec_v = encoders.mlp_spec(
        [feats.shape[1], plan.hidden, plan.hidden, coeff_dim],
        activation="relu",
        normalized=True,
    )
    init_v = encoders.init_params(spec_v, root.split(10, 0))
    train_view = datagen.PairedDataset(
        u=np.arange(n_train, dtype=np.float64)[:, None],
        v=feats[:n_train],
        meta={"generator": "lagrangian_train_view"},
    )
    test_ids = np.arange(n_train, n_total)

    def recalls(params_v) -> dict:
        e_u = encoders.encode(spec_u, params_u, test_ids[:, None].astype(np.float64))
        e_v = encoders.encode(spec_v, params_v, feats[test_ids])
        idx_u = crossmodal.build_index(e_u, test_ids.tolist(), normalized=True)
        idx_v = crossmodal.build_index(e_v, test_ids.tolist(), normalized=True)
        return {
            "r1_traj_to_coeff": crossmodal.recall_at_k(e_v, test_ids.tolist(), idx_u, 1),
            "r5_traj_to_coeff": crossmodal.recall_at_k(e_v, test_ids.tolist(), idx_u, 5),
            "r1_coeff_to_traj": crossmodal.recall_at_k(e_u, test_ids.tolist(), idx_v, 1),
            "r5_coeff_to_traj": crossmodal.recall_at_k(e_u, test_ids.tolist(), idx_v, 5),
        }

    def probe(epoch, pu, pv):
        return recalls(pv)

    params_u, params_v, history = training.train(
        plan.train, train_view, spec_u, spec_v, params_u, init_v, probe=probe
    )
    history.to_csv(os.path.join(plan.output_dir, "recall.csv"))
    final = history.metrics[-1]
    _write_report(
        plan,
        {
            "final": final,
            "first": history.metrics[0],
            "n_train": n_train,
            "n_heldout": plan.heldout,
            "coeff_dim": coeff_dim,
            "feature_dim": int(feats.shape[1]),
        },
        ["recall.csv"],
    )


RUNNERS = {
    "closed-form": _run_closed_form,
    "gaussian2d": _run_gaussian2d,
    "gaussian-gp": _run_gaussian_gp,
    "mnist": _run_mnist,
    "lagrangian": _run_lagrangian,
}


# ---------------------------------------------------------------------------
# verify


def _check_theorem_identity():
    rng = SeededRng(11)
    for n in (2, 8, 64):
        s = rng.split(n).standard_normal((n, n))
        gap = losses.loss_clip(s) - losses.loss_cond(s, 1.0, 1.0) - np.log(n)
        assert abs(gap) < 1e-12, f"identity gap {gap:.2e} at N={n}"
        half = 0.5 * losses.loss_cond(s, 2.0, 0.0) + 0.5 * losses.loss_cond(s, 0.0, 2.0)
        assert abs(losses.loss_cond(s, 1.0, 1.0) - half) < 1e-12, "lambda linearity"


def _reference_blocks() -> gaussian.BlockGaussian:
    return gaussian.BlockGaussian([[1.5]], [[1.0]], [[1.5]])


def _check_conditionals():
    cond = gaussian.conditional_u_given_v(_reference_blocks())
    assert abs(cond.gain[0, 0] - 2.0 / 3.0) < 1e-12, "gain"
    assert abs(cond.cov[0, 0] - 5.0 / 6.0) < 1e-12, "cov"


def _check_minimizers():
    g = _reference_blocks()
    assert abs(gaussian.minimizer_cond(g)[0, 0] - 4.0 / 9.0) < 1e-12, "cond minimizer"
    quad = gaussian.minimizer_quadratic_onesided(g)
    assert abs(quad.a[0, 0] - 0.8) < 1e-10, "quad a"
    assert abs(quad.b[0, 0] - 8.0 / 15.0) < 1e-10, "quad b"
    assert abs(gaussian.minimizer_joint(g)[0, 0] - 1.0 / 3.0) < 1e-10, "joint minimizer"


def _check_shrinkage():
    h = gaussian.shrinkage_h
    assert abs(h(2.0 / 3.0) - 0.5) < 1e-12, f"h(2/3) = {h(2.0 / 3.0)}"
    assert abs(h(1.0) - 0.5 * (np.sqrt(5.0) - 1.0)) < 1e-12, "h(1)"
    assert h(0.0) == 0.0, "h(0)"
    assert abs(h(1e-4) / 1e-4 - 1.0) < 1e-6, "small-sigma limit"


def _check_marginal_ordering():
    g = _reference_blocks()
    m_cond = gaussian.model_marginal_u(gaussian.minimizer_cond(g), g)[0, 0]
    m_joint = gaussian.model_marginal_u(gaussian.minimizer_joint(g), g)[0, 0]
    assert abs(m_cond - 2.7) < 1e-9, "cond-model marginal"
    assert abs(m_joint - 2.0) < 1e-9, "joint-model marginal"
    assert 1.5 < m_joint < m_cond, "ordering"


def _check_loss_inequality():
    rng = SeededRng(12)
    for i in range(50):
        n_x = int(rng.split(i, 0).integers(1, 4))
        n_y = int(rng.split(i, 1).integers(1, 4))
        base = rng.split(i, 2).standard_normal((n_x + n_y, n_x + n_y + 2))
        cov = base @ base.T / (n_x + n_y + 2) + 0.1 * np.eye(n_x + n_y)
        g = gaussian.BlockGaussian(cov[:n_x, :n_x], cov[:n_x, n_x:], cov[n_x:, n_x:])
        a = rng.split(i, 3).standard_normal((n_x, n_y))
        w = linalg.sym_sqrt(g.c_uu) @ a @ linalg.sym_sqrt(g.c_vv)
        top = np.linalg.svd(w, compute_uv=False)[0]
        a = a * (0.9 / top) if top > 0.9 else a
        assert gaussian.cond_loss_closed(a, g) <= gaussian.joint_loss_closed(a, g) + 1e-9


def _check_gradients():
    rng = SeededRng(13)
    spec = encoders.mlp_spec([3, 4, 2], activation="tanh", normalized=True)
    params = encoders.init_params(spec, rng.split(0))
    batch = rng.split(1).standard_normal((5, 3))
    cot = rng.split(2).standard_normal((5, 2))
    g = encoders.encode_vjp(spec, params, batch, cot)
    theta = params.theta
    step = 1e-6
    for probe in range(5):
        direction = rng.split(3, probe).standard_normal(theta.shape)
        direction /= np.linalg.norm(direction)
        plus = encoders.EncoderParams(theta + step * direction, spec.shape_table())
        minus = encoders.EncoderParams(theta - step * direction, spec.shape_table())
        fd = (
            float(np.sum(cot * encoders.encode(spec, plus, batch)))
            - float(np.sum(cot * encoders.encode(spec, minus, batch)))
        ) / (2 * step)
        an = float(g @ direction)
        assert abs(fd - an) < 1e-5 * max(1.0, abs(an)), f"probe {probe}: {fd} vs {an}"


def _check_loss_grads():
    rng = SeededRng(14)
    s = rng.split(0).standard_normal((6, 6))
    for kind in (losses.LossKind("clip"), losses.LossKind("cond", 2.0, 0.5)):
        value, grad = losses.loss_value_and_grad(kind, encoders.SimilarityBatch(s, "inner_product", 1.0))
        step = 1e-6
        d = rng.split(1).standard_normal((6, 6))
        d /= np.linalg.norm(d)
        if kind.variant == "clip":
            fd = (losses.loss_clip(s + step * d) - losses.loss_clip(s - step * d)) / (2 * step)
        else:
            fd = (
                losses.loss_cond(s + step * d, 2.0, 0.5) - losses.loss_cond(s - step * d, 2.0, 0.5)
            ) / (2 * step)
        assert abs(float(np.sum(grad * d)) - fd) < 1e-7, kind.variant


def _check_mmd():
    rng = SeededRng(15)
    x = rng.split(0).standard_normal((40, 2))
    k = losses.Kernel("gaussian", bandwidth=1.0)
    assert abs(losses.mmd_unbiased(x, x.copy(), k)) < 1e-12, "identical sets"
    y = rng.split(1).standard_normal((40, 2)) + 5.0
    assert losses.mmd_unbiased(x, y, k) > 0.5, "separated sets"


def _check_exp_quadratic():
    val = gaussian.exp_quadratic_expectation([0.3, -0.2], np.eye(2), np.zeros((2, 2)), np.zeros(2))
    assert abs(val - 1.0) < 1e-12, "b=0, c=0 must give 1"
    val = gaussian.exp_quadratic_expectation([0.0], [[1.0]], [[0.5]], [0.0])
    assert abs(val - np.sqrt(2.0)) < 1e-12, "1d half-tilt"


def _check_recovery():
    rng = SeededRng(16)
    base = rng.split(0).standard_normal((3, 5))
    b = base @ base.T / 5 + 0.5 * np.eye(3)
    a = rng.split(1).standard_normal((3, 4))
    q = gaussian.QuadraticTiltingParams(a=a, b=b, c=np.zeros((4, 4)))
    g_mat, h_mat = gaussian.recover_encoders(q)
    assert np.max(np.abs(g_mat.T @ h_mat - a)) < 1e-10, "a round trip"
    assert np.max(np.abs(g_mat.T @ g_mat - b)) < 1e-10, "b round trip"


def _check_flow():
    cfg = datagen.FlowConfig(m=1, omega=tuple(np.zeros(9)), x0=(0.25, 0.5), dt=1e-3, t_final=0.01)
    psi = np.zeros(9, dtype=np.complex128)
    psi[datagen.mode_set(1).tolist().index([1, 0])] = 0.5
    psi[datagen.mode_set(1).tolist().index([-1, 0])] = 0.5
    vel = datagen.velocity_eval(datagen.coeffs_to_real(psi), cfg, 0.0, (0.25, 0.5))
    want = np.array([0.0, -2.0 * np.pi * np.sin(2.0 * np.pi * 0.25)])
    assert np.max(np.abs(vel - want)) < 1e-12, f"velocity {vel} vs {want}"
    coeffs, traj = datagen.lagrangian_pair(cfg, SeededRng(17))
    assert np.all((traj >= 0.0) & (traj < 1.0)), "wrap"


def _check_retrieval():
    index = crossmodal.build_index(np.eye(3), [0, 1, 2], normalized=False)
    assert crossmodal.retrieve([0.1, 0.9, 0.5], index, 2) == [1, 2], "ranking"
    tie = crossmodal.build_index([[1.0, 0.0], [1.0, 0.0]], [7, 8], normalized=False)
    assert crossmodal.retrieve([1.0, 0.0], tie, 1) == [7], "tie break"


def _check_serialization():
    rng = SeededRng(18)
    m = rng.split(0).standard_normal((3, 2))
    back = linalg.matrix_from_json(linalg.matrix_to_json(m))
    assert np.array_equal(m, back), "matrix json round trip"


def _check_ce_equivalence():
    rng = SeededRng(19)
    n, k = 32, 7
    logits = rng.split(0).standard_normal((n, k))
    y = rng.split(1).integers(0, k, (n,))
    s = logits[:, y].T / 1.0  # s[j, i] = logit of class y_j for input i
    value = losses.loss_cond(s, 2.0, 0.0)
    counts = np.bincount(y, minlength=k)
    with np.errstate(divide="ignore"):
        log_pi = np.where(counts > 0, np.log(np.maximum(counts, 1) / n), -np.inf)
    from scipy.special import logsumexp as lse

    ce = float(-np.mean(logits[np.arange(n), y]) + np.mean(lse(logits + log_pi, axis=1)))
    assert abs(value - ce) < 1e-10, f"{value} vs {ce}"


VERIFY_CHECKS = [
    ("theorem_identity", _check_theorem_identity),
    ("conditional_5_4", _check_conditionals),
    ("minimizers_5_4", _check_minimizers),
    ("shrinkage_h", _check_shrinkage),
    ("marginal_ordering", _check_marginal_ordering),
    ("cond_joint_inequality", _check_loss_inequality),
    ("encoder_gradients", _check_gradients),
    ("loss_gradients", _check_loss_grads),
    ("mmd_sanity", _check_mmd),
    ("exp_quadratic", _check_exp_quadratic),
    ("encoder_recovery", _check_recovery),
    ("flow_velocity", _check_flow),
    ("retrieval", _check_retrieval),
    ("serialization", _check_serialization),
    ("cross_entropy_equivalence", _check_ce_equivalence),
]


def verify(perturb: str | None = None) -> int:
    """Run the analytic self-check suite; one line per check."""
    restore = None
    if perturb == "shrinkage_h":
        original = gaussian.shrinkage_h
        gaussian.shrinkage_h = lambda sigma: original(sigma) * 1.001
        restore = ("shrinkage_h", original)
    elif perturb is not None:
        print(f"unknown perturbation {perturb!r}")
        return 1
    failed = []
    try:
        for name, fn in VERIFY_CHECKS:
            try:
                fn()
            except Exception as exc:  # noqa: BLE001 -- report, don't crash
                print(f"FAIL {name}: {exc}")
                failed.append(name)
            else:
                print(f"PASS {name}")
    finally:
        if restore is not None:
            gaussian.shrinkage_h = restore[1]
    if failed:
        print(f"verify failed: first failing check is {failed[0]}")
        return 1
    print(f"verify ok: {len(VERIFY_CHECKS)} checks passed")
    return 0


# ---------------------------------------------------------------------------
# entry point


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tiltlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="execute an experiment config")
    run_p.add_argument("config")
    run_p.add_argument("--seed", type=int, default=None, help="override the config seed")
    run_p.add_argument("--output-dir", default=None, help="override the config output_dir")
    ver_p = sub.add_parser("verify", help="run the analytic self-check suite")
    ver_p.add_argument("--perturb", default=None, help=argparse.SUPPRESS)  # test hook
    args = parser.parse_args(argv)

    if args.command == "verify":
        return verify(perturb=args.perturb)

    try:
        plan = load_plan(args.config, args.seed, args.output_dir)
        os.makedirs(plan.output_dir, exist_ok=True)
        if not os.access(plan.output_dir, os.W_OK):
            raise ConfigError(f"config.output_dir: {plan.output_dir} is not writable")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        RUNNERS[plan.experiment](plan)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TiltlabError, ValueError, OSError) as exc:
        print(f"runtime error in {plan.experiment}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
