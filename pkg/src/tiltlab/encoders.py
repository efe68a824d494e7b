"""Encoder families, tilting similarity matrices, and exact VJPs.

Five families: linear (pure matrix), affine (matrix + bias), mlp (dense
layers with relu or tanh hidden activations and a linear head), one_hot
(class index to standard basis vector, parameter-free), and frozen_table
(row lookup into a fixed embedding table; the table lives in the parameter
vector but is never updated by training).

All parameters travel as one flat float64 vector next to a per-layer shape
table, so the optimizer is family-agnostic. encode_vjp returns the exact
gradient of <cotangent, encode(batch)> with respect to that vector,
including the row-normalization Jacobian when the spec asks for unit rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ZeroNormRow
from .rng import SeededRng

FAMILIES = ("linear", "affine", "mlp", "one_hot", "frozen_table")
ACTIVATIONS = ("relu", "tanh")
TILTING_INNER = "inner_product"
TILTING_L2 = "l2_distance"
TILTINGS = (TILTING_INNER, TILTING_L2)


@dataclass(frozen=True)
class EncoderSpec:
    """Architecture description. dims is family-dependent:

    linear/affine: (n_in, n_e); mlp: full layer size chain (n_in, ..., n_e);
    one_hot: (n_classes,); frozen_table: (n_items, n_e).
    """

    family: str
    dims: tuple[int, ...]
    activation: str | None = None
    normalized: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown encoder family {self.family!r}")
        dims = tuple(int(d) for d in self.dims)
        if any(d <= 0 for d in dims):
            raise ValueError(f"layer sizes must be positive, got {dims}")
        expected = {"linear": 2, "affine": 2, "one_hot": 1, "frozen_table": 2}
        if self.family == "mlp":
            if len(dims) < 2:
                raise ValueError("mlp needs at least input and output sizes")
            if self.activation not in ACTIVATIONS:
                raise ValueError(f"mlp activation must be one of {ACTIVATIONS}")
        else:
            if len(dims) != expected[self.family]:
                raise ValueError(
                    f"{self.family} takes {expected[self.family]} dims, got {len(dims)}"
                )
            if self.activation is not None:
                raise ValueError(f"{self.family} takes no activation")
        object.__setattr__(self, "dims", dims)

    @property
    def n_in(self) -> int:
        if self.family in ("one_hot", "frozen_table"):
            return 1  # a single index column
        return self.dims[0]

    @property
    def n_e(self) -> int:
        if self.family == "one_hot":
            return self.dims[0]
        return self.dims[-1]

    @property
    def trainable(self) -> bool:
        return self.family not in ("one_hot", "frozen_table")

    def shape_table(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        if self.family == "linear":
            n_in, n_e = self.dims
            return (("w0", (n_e, n_in)),)
        if self.family == "affine":
            n_in, n_e = self.dims
            return (("w0", (n_e, n_in)), ("b0", (n_e,)))
        if self.family == "mlp":
            table = []
            for i in range(len(self.dims) - 1):
                table.append((f"w{i}", (self.dims[i + 1], self.dims[i])))
                table.append((f"b{i}", (self.dims[i + 1],)))
            return tuple(table)
        if self.family == "frozen_table":
            return (("table", self.dims),)
        return ()

    def n_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.shape_table())


def linear_spec(n_in: int, n_e: int, normalized: bool = False) -> EncoderSpec:
    return EncoderSpec("linear", (n_in, n_e), normalized=normalized)


def affine_spec(n_in: int, n_e: int, normalized: bool = False) -> EncoderSpec:
    return EncoderSpec("affine", (n_in, n_e), normalized=normalized)


def mlp_spec(layer_sizes, activation: str = "relu", normalized: bool = False) -> EncoderSpec:
    return EncoderSpec("mlp", tuple(layer_sizes), activation=activation, normalized=normalized)


def one_hot_spec(n_classes: int) -> EncoderSpec:
    return EncoderSpec("one_hot", (n_classes,))


def frozen_table_spec(n_items: int, n_e: int, normalized: bool = False) -> EncoderSpec:
    return EncoderSpec("frozen_table", (n_items, n_e), normalized=normalized)


@dataclass(frozen=True)
class EncoderParams:
    """Flat parameter vector plus the shape table it factors through."""

    theta: np.ndarray
    shapes: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        total = sum(int(np.prod(s)) for _, s in self.shapes)
        if theta.size != total:
            raise ValueError(f"parameter vector length {theta.size}, shapes need {total}")
        if theta.size and not np.all(np.isfinite(theta)):
            raise ValueError("parameters must be finite")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "shapes", tuple((n, tuple(s)) for n, s in self.shapes))

    def unflatten(self) -> dict[str, np.ndarray]:
        out = {}
        offset = 0
        for name, shape in self.shapes:
            size = int(np.prod(shape))
            out[name] = self.theta[offset : offset + size].reshape(shape)
            offset += size
        return out


def init_params(spec: EncoderSpec, rng: SeededRng) -> EncoderParams:
    """Per-layer uniform init on [-1/sqrt(fan_in), 1/sqrt(fan_in)].

    frozen_table has no sensible random default (its rows are prescribed
    embeddings); build it with params_from_table instead.
    """
    if spec.family == "frozen_table":
        raise ValueError("frozen_table rows are prescribed; use params_from_table")
    pieces = []
    for name, shape in spec.shape_table():
        fan_in = shape[1] if len(shape) == 2 else shape[0]
        if name.startswith("b"):
            # biases share the bound of the weight they accompany
            layer = int(name[1:])
            fan_in = spec.dims[layer]
        bound = 1.0 / np.sqrt(fan_in)
        pieces.append(rng.uniform(-bound, bound, shape).ravel())
    theta = np.concatenate(pieces) if pieces else np.zeros(0)
    return EncoderParams(theta, spec.shape_table())


def params_from_table(spec: EncoderSpec, rows) -> EncoderParams:
    if spec.family != "frozen_table":
        raise ValueError("params_from_table only applies to frozen_table specs")
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape != spec.dims:
        raise ValueError(f"table shape {rows.shape}, spec wants {spec.dims}")
    return EncoderParams(rows.ravel(), spec.shape_table())


def _check_batch(spec: EncoderSpec, batch) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 1:
        batch = batch[:, None]
    if batch.ndim != 2 or batch.shape[1] != spec.n_in:
        raise ValueError(f"batch shape {batch.shape}, spec wants (N, {spec.n_in})")
    return batch


def _indices(spec: EncoderSpec, batch: np.ndarray, limit: int) -> np.ndarray:
    idx = batch[:, 0]
    rounded = np.round(idx)
    if not np.all(np.abs(idx - rounded) < 1e-9):
        raise ValueError(f"{spec.family} batch entries must be integral indices")
    idx = rounded.astype(np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= limit):
        raise ValueError(f"index out of range [0, {limit})")
    return idx


def _raw_forward(spec: EncoderSpec, params: EncoderParams, batch: np.ndarray):
    """Unnormalized forward pass; returns (output, cache for the backward)."""
    if spec.family == "one_hot":
        idx = _indices(spec, batch, spec.n_e)
        out = np.zeros((batch.shape[0], spec.n_e))
        out[np.arange(idx.size), idx] = 1.0
        return out, idx
    weights = params.unflatten()
    if spec.family == "frozen_table":
        idx = _indices(spec, batch, spec.dims[0])
        return weights["table"][idx].copy(), idx
    if spec.family in ("linear", "affine"):
        out = batch @ weights["w0"].T
        if spec.family == "affine":
            out = out + weights["b0"]
        return out, None
    # mlp: cache each layer's input and pre-activation
    x = batch
    cache = []
    n_layers = len(spec.dims) - 1
    for i in range(n_layers):
        z = x @ weights[f"w{i}"].T + weights[f"b{i}"]
        cache.append((x, z))
        if i < n_layers - 1:
            x = np.maximum(z, 0.0) if spec.activation == "relu" else np.tanh(z)
        else:
            x = z
    return x, cache


def encode(spec: EncoderSpec, params: EncoderParams, batch) -> np.ndarray:
    """Embed a batch; rows are g(batch_i). Normalizes rows when asked."""
    batch = _check_batch(spec, batch)
    if params.shapes != spec.shape_table():
        raise ValueError("params do not belong to this spec")
    out, _ = _raw_forward(spec, params, batch)
    if spec.normalized:
        norms = np.linalg.norm(out, axis=1)
        zero = np.flatnonzero(norms == 0.0)
        if zero.size:
            raise ZeroNormRow(f"cannot normalize zero embedding at row {zero[0]}")
        out = out / norms[:, None]
    return out


def encode_vjp(spec: EncoderSpec, params: EncoderParams, batch, cotangent) -> np.ndarray:
    """Gradient of <cotangent, encode(spec, params, batch)> wrt the flat params.

    one_hot has no parameters (empty gradient). frozen_table gets the true
    table gradient (scatter-added over rows); callers that treat the table
    as frozen simply never apply it.
    """
    batch = _check_batch(spec, batch)
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape != (batch.shape[0], spec.n_e):
        raise ValueError(f"cotangent shape {cot.shape}, expected {(batch.shape[0], spec.n_e)}")
    if params.shapes != spec.shape_table():
        raise ValueError("params do not belong to this spec")
    if spec.family == "one_hot":
        return np.zeros(0)

    out, cache = _raw_forward(spec, params, batch)
    if spec.normalized:
        norms = np.linalg.norm(out, axis=1)
        zero = np.flatnonzero(norms == 0.0)
        if zero.size:
            raise ZeroNormRow(f"cannot normalize zero embedding at row {zero[0]}")
        unit = out / norms[:, None]
        cot = (cot - unit * np.sum(cot * unit, axis=1, keepdims=True)) / norms[:, None]

    weights = params.unflatten()
    grads = {name: np.zeros(shape) for name, shape in spec.shape_table()}
    if spec.family == "frozen_table":
        np.add.at(grads["table"], cache, cot)
    elif spec.family in ("linear", "affine"):
        grads["w0"] = cot.T @ batch
        if spec.family == "affine":
            grads["b0"] = cot.sum(axis=0)
    else:
        n_layers = len(spec.dims) - 1
        delta = cot
        for i in reversed(range(n_layers)):
            x_in, z = cache[i]
            if i < n_layers - 1:
                if spec.activation == "relu":
                    delta = delta * (z > 0.0)
                else:
                    delta = delta * (1.0 - np.tanh(z) ** 2)
            grads[f"w{i}"] = delta.T @ x_in
            grads[f"b{i}"] = delta.sum(axis=0)
            if i > 0:
                delta = delta @ weights[f"w{i}"]
    return np.concatenate([grads[name].ravel() for name, _ in spec.shape_table()])


@dataclass(frozen=True)
class SimilarityBatch:
    """Square score matrix s[i][j] = score(u_i, v_j) under a tilting."""

    s: np.ndarray
    tilting: str
    tau: float


def similarity_matrix(e_u, e_v, tilting: str, tau: float) -> SimilarityBatch:
    """Pairwise tilting scores. inner_product: <e_u_i, e_v_j>/tau;
    l2_distance: -|e_u_i - e_v_j|^2 / (2 tau)."""
    if tilting not in TILTINGS:
        raise ValueError(f"unknown tilting {tilting!r}")
    if not tau > 0:
        raise ValueError("tau must be positive")
    e_u = np.asarray(e_u, dtype=np.float64)
    e_v = np.asarray(e_v, dtype=np.float64)
    if e_u.ndim != 2 or e_v.ndim != 2 or e_u.shape != e_v.shape:
        raise ValueError(f"embedding shapes {e_u.shape} and {e_v.shape} must match")
    if tilting == TILTING_INNER:
        s = e_u @ e_v.T
        if tau != 1.0:
            s /= tau
    else:
        sq_u = np.sum(e_u**2, axis=1)[:, None]
        sq_v = np.sum(e_v**2, axis=1)[None, :]
        s = -(sq_u + sq_v - 2.0 * e_u @ e_v.T) / (2.0 * tau)
    # nan propagates through min/max, so two scalar reductions cover the
    # full finiteness check without materializing a boolean mask
    if not (np.isfinite(np.min(s)) and np.isfinite(np.max(s))):
        raise ValueError("non-finite similarity scores")
    return SimilarityBatch(s=s, tilting=tilting, tau=float(tau))


def similarity_vjp(e_u, e_v, tilting: str, tau: float, ds) -> tuple[np.ndarray, np.ndarray]:
    """Backpropagate a score-matrix cotangent ds to embedding cotangents."""
    if tilting not in TILTINGS:
        raise ValueError(f"unknown tilting {tilting!r}")
    e_u = np.asarray(e_u, dtype=np.float64)
    e_v = np.asarray(e_v, dtype=np.float64)
    ds = np.asarray(ds, dtype=np.float64)
    if ds.shape != (e_u.shape[0], e_v.shape[0]):
        raise ValueError("cotangent shape does not match the score matrix")
    if tilting == TILTING_INNER:
        return ds @ e_v / tau, ds.T @ e_u / tau
    row = ds.sum(axis=1)[:, None]
    col = ds.sum(axis=0)[:, None]
    cot_u = -(row * e_u - ds @ e_v) / tau
    cot_v = -(col * e_v - ds.T @ e_u) / tau
    return cot_u, cot_v


def spec_to_json(spec: EncoderSpec) -> dict:
    return {
        "family": spec.family,
        "dims": list(spec.dims),
        "activation": spec.activation,
        "normalized": spec.normalized,
    }


def spec_from_json(doc: dict) -> EncoderSpec:
    return EncoderSpec(
        family=doc["family"],
        dims=tuple(doc["dims"]),
        activation=doc.get("activation"),
        normalized=bool(doc.get("normalized", False)),
    )


def save_checkpoint(path, spec: EncoderSpec, params: EncoderParams, seed, train_meta=None):
    doc = {
        "spec": spec_to_json(spec),
        "params": params.theta.tolist(),
        "seed": seed,
        "train_meta": train_meta or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    spec = spec_from_json(doc["spec"])
    params = EncoderParams(np.asarray(doc["params"], dtype=np.float64), spec.shape_table())
    return spec, params, doc["seed"], doc.get("train_meta", {})
