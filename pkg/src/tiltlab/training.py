"""Deterministic minibatch Adam training for encoder pairs.

The loop is a pure function of (config, data, initial parameters): epoch
shuffles come from a counter-based stream keyed by (0, epoch) under the
config seed, batches are consecutive slices of the shuffled index list, and
each step backpropagates the chosen loss through the similarity matrix into
both encoders. Specs without trainable parameters (one_hot, frozen_table)
pass through untouched.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .encoders import (
    EncoderParams,
    EncoderSpec,
    TILTING_INNER,
    TILTINGS,
    encode,
    encode_vjp,
    similarity_matrix,
    similarity_vjp,
)
from .errors import NonFiniteGradient
from .losses import LossKind, loss_value_and_grad
from .rng import SeededRng


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    epochs: int
    batch_size: int
    learning_rate: float
    tau: float
    loss: LossKind
    tilting: str
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.tilting not in TILTINGS:
            raise ValueError(f"unknown tilting {self.tilting!r}")


@dataclass
class TrainHistory:
    """Per-epoch mean loss, caller-supplied metrics, and wall-clock seconds."""

    losses: list[float] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def to_csv(self, path):
        """epoch, loss, then metric columns. Wall-clock stays out of the
        file so identical runs emit identical bytes."""
        keys = sorted({k for m in self.metrics for k in m})
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", *keys])
            for epoch, (loss, met) in enumerate(zip(self.losses, self.metrics)):
                writer.writerow(
                    [epoch, f"{loss:.17g}", *(f"{met[k]:.17g}" if k in met else "" for k in keys)]
                )


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int

    @staticmethod
    def zeros(n: int) -> "AdamState":
        return AdamState(m=np.zeros(n), v=np.zeros(n), t=0)


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update; rejects non-finite gradients."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient("gradient contains nan or inf")
    b1, b2 = cfg.adam_betas
    t = state.t + 1
    m = b1 * state.m + (1.0 - b1) * grad
    v = b2 * state.v + (1.0 - b2) * grad**2
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    new_params = params - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return new_params, AdamState(m=m, v=v, t=t)


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int):
    """Index batches for one epoch: seeded shuffle, consecutive slices, last
    slice dropped when it has fewer than 2 rows."""
    perm = SeededRng(seed).split(0, epoch).permutation(n)
    out = []
    for start in range(0, n, batch_size):
        idx = perm[start : start + batch_size]
        if idx.size >= 2:
            out.append(idx)
    return out


# |score| bound for the unshifted exp fast path, with headroom so even a
# whole batch row of near-maximal terms sums without overflow
_EXP_SAFE = 680.0


def _fused_inner_step(e_u, e_v, loss: LossKind, tau: float, ws: dict):
    """Loss value and embedding cotangents for the clip/cond losses under
    the inner-product tilting, from one shared exp table and skinny matmuls.

    Mathematically the same composition as similarity_matrix ->
    loss_value_and_grad -> similarity_vjp, reorganized so the row/column
    softmax matrices are never materialized: with P_col = E / colsum and
    P_row = E / rowsum, the cotangent contractions P @ e and P.T @ e reduce
    to scalings of E @ e and E.T @ e. Fresh 2 MB temporaries per step would
    otherwise dominate the profile at batch 512, so s and E live in the
    caller's workspace. Returns None when the scores leave the comfortable
    exp range (or are not finite), handing the step to the generic chain.
    """
    n = e_u.shape[0]
    if n not in ws:
        ws[n] = (np.empty((n, n)), np.empty((n, n)))
    s, e = ws[n]
    np.matmul(e_u, e_v.T, out=s)
    if tau != 1.0:
        s /= tau
    if not (-_EXP_SAFE < np.min(s) and np.max(s) < _EXP_SAFE):
        return None
    np.exp(s, out=e)
    z_col = np.sum(e, axis=0)
    z_row = np.sum(e, axis=1)
    lam_u, lam_v = (1.0, 1.0) if loss.variant == "clip" else (loss.lam_u, loss.lam_v)
    logn = np.log(n)
    diag_mean = float(np.mean(np.diag(s)))
    term_u = diag_mean - float(np.mean(np.log(z_col)) - logn)
    term_v = diag_mean - float(np.mean(np.log(z_row)) - logn)
    value = -0.5 * lam_u * term_u - 0.5 * lam_v * term_v
    if loss.variant == "clip":
        value += logn
    c = 1.0 / (2.0 * n * tau)
    lam_sum = lam_u + lam_v
    cot_u = c * (
        lam_u * (e @ (e_v / z_col[:, None]))
        + lam_v * ((e @ e_v) / z_row[:, None])
        - lam_sum * e_v
    )
    cot_v = c * (
        lam_u * ((e.T @ e_u) / z_col[:, None])
        + lam_v * (e.T @ (e_u / z_row[:, None]))
        - lam_sum * e_u
    )
    return value, cot_u, cot_v


def train(
    cfg: TrainConfig,
    data,
    spec_u: EncoderSpec,
    spec_v: EncoderSpec,
    init_u: EncoderParams,
    init_v: EncoderParams,
    probe=None,
):
    """Run the full loop; returns (params_u, params_v, TrainHistory).

    data supplies u and v sample matrices (a PairedDataset or anything with
    those attributes). probe, when given, is called as probe(epoch,
    params_u, params_v) after each epoch and must return a dict of floats.
    """
    u_all = np.asarray(data.u, dtype=np.float64)
    v_all = np.asarray(data.v, dtype=np.float64)
    if u_all.shape[0] != v_all.shape[0]:
        raise ValueError("u and v must pair up row for row")
    if u_all.shape[1] != spec_u.n_in or v_all.shape[1] != spec_v.n_in:
        raise ValueError(
            f"dataset widths {(u_all.shape[1], v_all.shape[1])} do not match "
            f"spec inputs {(spec_u.n_in, spec_v.n_in)}"
        )
    n = u_all.shape[0]
    if n < 2:
        raise ValueError("need at least 2 pairs")

    params_u, params_v = init_u, init_v
    state_u = AdamState.zeros(params_u.theta.size)
    state_v = AdamState.zeros(params_v.theta.size)
    history = TrainHistory()
    fusable = cfg.tilting == TILTING_INNER and cfg.loss.variant in ("clip", "cond")
    ws: dict = {}

    for epoch in range(cfg.epochs):
        tic = time.perf_counter()
        step_losses = []
        for step, idx in enumerate(epoch_batches(n, cfg.batch_size, cfg.seed, epoch)):
            u_batch = u_all[idx]
            v_batch = v_all[idx]
            e_u = encode(spec_u, params_u, u_batch)
            e_v = encode(spec_v, params_v, v_batch)
            fused = (
                _fused_inner_step(e_u, e_v, cfg.loss, cfg.tau, ws) if fusable else None
            )
            if fused is not None:
                value, cot_u, cot_v = fused
            else:
                sb = similarity_matrix(e_u, e_v, cfg.tilting, cfg.tau)
                value, ds = loss_value_and_grad(cfg.loss, sb, u_batch, v_batch)
                cot_u, cot_v = similarity_vjp(e_u, e_v, cfg.tilting, cfg.tau, ds)
            step_losses.append(value)
            try:
                if spec_u.trainable:
                    g_u = encode_vjp(spec_u, params_u, u_batch, cot_u)
                    theta_u, state_u = adam_step(params_u.theta, g_u, state_u, cfg)
                    params_u = EncoderParams(theta_u, spec_u.shape_table())
                if spec_v.trainable:
                    g_v = encode_vjp(spec_v, params_v, v_batch, cot_v)
                    theta_v, state_v = adam_step(params_v.theta, g_v, state_v, cfg)
                    params_v = EncoderParams(theta_v, spec_v.shape_table())
            except NonFiniteGradient as exc:
                raise NonFiniteGradient(f"epoch {epoch}, step {step}: {exc}") from exc
        history.losses.append(float(np.mean(step_losses)))
        history.metrics.append(dict(probe(epoch, params_u, params_v)) if probe else {})
        history.seconds.append(time.perf_counter() - tic)
    return params_u, params_v, history
