"""Empirical losses over similarity batches, with exact score gradients.

Index convention throughout: s[i][j] is the tilting score of (u^i, v^j), so
column i collects every u candidate for the conditioning sample v^i and row
i collects every v candidate for u^i.

The two MMD losses keep their kernel Gram matrices separate from the score
matrix: the Grams carry no encoder dependence (training computes them on
raw data batches), so the exact parameter gradient flows through the
softmax weights alone. The batch-level wrappers loss_cond_mmd and
loss_joint_mmd apply kernel and tilting to the same vectors for
self-contained evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from .encoders import TILTINGS, SimilarityBatch, similarity_matrix

KERNEL_FAMILIES = ("gaussian", "polynomial")
LOSS_VARIANTS = ("clip", "cond", "joint", "cond_mmd", "joint_mmd")


@dataclass(frozen=True)
class Kernel:
    family: str
    bandwidth: float = 1.0
    degree: int = 2
    offset: float = 1.0

    def __post_init__(self):
        if self.family not in KERNEL_FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if self.family == "gaussian" and not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if self.family == "polynomial" and self.degree < 1:
            raise ValueError("degree must be at least 1")


@dataclass(frozen=True)
class LossKind:
    """variant in {clip, cond, joint, cond_mmd, joint_mmd}; lam weights apply
    to the cond variants, kernel to the mmd variants."""

    variant: str
    lam_u: float = 1.0
    lam_v: float = 1.0
    kernel: Kernel | None = None

    def __post_init__(self):
        if self.variant not in LOSS_VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}")
        if self.variant in ("cond", "cond_mmd"):
            if self.lam_u < 0 or self.lam_v < 0 or (self.lam_u == 0 and self.lam_v == 0):
                raise ValueError("lam_u, lam_v must be nonnegative and not both zero")
        if self.variant.endswith("mmd") and self.kernel is None:
            raise ValueError(f"{self.variant} requires a kernel")


def kernel_gram(k: Kernel, x, y=None) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = x if y is None else np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[1] != y.shape[1]:
        raise ValueError("kernel inputs must share a dimension")
    if k.family == "polynomial":
        return (x @ y.T + k.offset) ** k.degree
    sq = np.sum(x**2, axis=1)[:, None] + np.sum(y**2, axis=1)[None, :] - 2.0 * x @ y.T
    np.clip(sq, 0.0, None, out=sq)
    return np.exp(-sq / (2.0 * k.bandwidth**2))


def median_heuristic_bandwidth(x, y=None) -> float:
    """Median pairwise distance of the pooled sample; 1.0 if degenerate."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    pooled = x if y is None else np.vstack([x, np.atleast_2d(np.asarray(y, dtype=np.float64))])
    sq = (
        np.sum(pooled**2, axis=1)[:, None]
        + np.sum(pooled**2, axis=1)[None, :]
        - 2.0 * pooled @ pooled.T
    )
    np.clip(sq, 0.0, None, out=sq)
    d = np.sqrt(sq[np.triu_indices_from(sq, k=1)])
    if d.size == 0:
        return 1.0
    med = float(np.median(d))
    return med if med > 0 else 1.0


def _scores(s) -> np.ndarray:
    arr = s.s if isinstance(s, SimilarityBatch) else np.asarray(s, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("score matrix must be 2-d")
    return arr


def _square_scores(s, min_n: int = 2) -> np.ndarray:
    arr = _scores(s)
    if arr.shape[0] != arr.shape[1]:
        raise ValueError(f"score matrix must be square, got {arr.shape}")
    if arr.shape[0] < min_n:
        raise ValueError(f"need a batch of at least {min_n}")
    return arr


def _axis_lse_softmax(arr: np.ndarray, axis: int):
    """Shifted-exp logsumexp and softmax along one axis from a single exp
    pass. The generic scipy versions redo the exp and pay heavy dispatch
    overhead per call, which dominates the training step on 512x512 score
    batches; scores here are finite so the simple form suffices."""
    m = np.max(arr, axis=axis, keepdims=True)
    e = np.subtract(arr, m)
    np.exp(e, out=e)
    z = np.sum(e, axis=axis, keepdims=True)
    lse = np.squeeze(m + np.log(z), axis=axis)
    e /= z
    return lse, e


def _clip_value(arr: np.ndarray, lse_col: np.ndarray, lse_row: np.ndarray) -> float:
    n = arr.shape[0]
    diag = np.diag(arr)
    return float((np.sum(lse_col - diag) + np.sum(lse_row - diag)) / (2.0 * n))


def _cond_value(
    arr: np.ndarray, lse_col: np.ndarray, lse_row: np.ndarray, lam_u: float, lam_v: float
) -> float:
    n = arr.shape[0]
    diag_mean = float(np.mean(np.diag(arr)))
    logn = np.log(n)
    term_u = diag_mean - float(np.mean(lse_col - logn))
    term_v = diag_mean - float(np.mean(lse_row - logn))
    return -0.5 * lam_u * term_u - 0.5 * lam_v * term_v


def _cond_grad(
    arr: np.ndarray, p_col: np.ndarray, p_row: np.ndarray, lam_u: float, lam_v: float
) -> np.ndarray:
    # consumes p_col and p_row as scratch buffers
    n = arr.shape[0]
    if lam_u != 1.0:
        p_col *= lam_u
    if lam_v != 1.0:
        p_row *= lam_v
    p_col += p_row
    p_col[np.diag_indices(n)] -= lam_u + lam_v
    p_col /= 2.0 * n
    return p_col


def loss_clip(s) -> float:
    """Symmetric cross-entropy: -(1/2N) sum_i [log softmax over column i at
    the diagonal + log softmax over row i at the diagonal]."""
    arr = _square_scores(s)
    lse_col, _ = _axis_lse_softmax(arr, 0)
    lse_row, _ = _axis_lse_softmax(arr, 1)
    return _clip_value(arr, lse_col, lse_row)


def loss_cond(s, lam_u: float, lam_v: float) -> float:
    """Weighted conditional loss; equals loss_clip - log N at (1, 1)."""
    arr = _square_scores(s)
    lse_col, _ = _axis_lse_softmax(arr, 0)
    lse_row, _ = _axis_lse_softmax(arr, 1)
    return _cond_value(arr, lse_col, lse_row, lam_u, lam_v)


def grad_cond(s, lam_u: float, lam_v: float) -> np.ndarray:
    arr = _square_scores(s)
    _, p_col = _axis_lse_softmax(arr, 0)
    _, p_row = _axis_lse_softmax(arr, 1)
    return _cond_grad(arr, p_col, p_row, lam_u, lam_v)


def grad_clip(s) -> np.ndarray:
    # the log N offset of loss_clip is constant in s
    return grad_cond(s, 1.0, 1.0)


def loss_joint(s_pos, s_neg) -> float:
    """-mean(positive scores) + log mean exp(negative scores).

    s_neg holds the scores of a product-measure batch (typically all N^2
    pairings of a paired batch, diagonal included).
    """
    pos = np.asarray(s_pos, dtype=np.float64).reshape(-1)
    neg = _scores(s_neg)
    if pos.size < 2:
        raise ValueError("need at least 2 positive scores")
    return float(-np.mean(pos) + logsumexp(neg) - np.log(neg.size))


def grad_joint(s_pos, s_neg) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(s_pos, dtype=np.float64).reshape(-1)
    neg = _scores(s_neg)
    g_pos = np.full(pos.shape, -1.0 / pos.size)
    g_neg = softmax(neg.ravel()).reshape(neg.shape)
    return g_pos, g_neg


def mmd_unbiased(x, y, k: Kernel) -> float:
    """Unbiased squared MMD with the i != j exclusion on all three terms
    (cross term included), which requires equally sized samples."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if x.shape[0] != y.shape[0]:
        raise ValueError("the estimator requires equally sized samples")
    n = x.shape[0]
    if n < 2:
        raise ValueError("need at least 2 samples per set")
    kxx = kernel_gram(k, x)
    kyy = kernel_gram(k, y)
    kxy = kernel_gram(k, x, y)
    c = 1.0 / (n * (n - 1))

    def off_diag_sum(m):
        return float(m.sum() - np.trace(m))

    return c * off_diag_sum(kxx) - 2.0 * c * off_diag_sum(kxy) + c * off_diag_sum(kyy)


def _cond_mmd_side(k_gram: np.ndarray, w: np.ndarray) -> float:
    """One conditional-MMD side from a Gram matrix and column-stochastic
    weights w[j, i] (weight of candidate j for conditioning sample i).

    Self term: (1/(N-1)) [Tr(W^T K W) - sum_{j,i} K_jj W_ji^2]; cross term:
    (1/(N-1)) [Tr(K W) - sum_i K_ii W_ii]. Uniform weights reduce both to
    the plain unbiased kernel means. Value is self/2 - cross.
    """
    n = k_gram.shape[0]
    kw = k_gram @ w
    kdiag = np.diag(k_gram)
    s_term = (np.sum(w * kw) - np.sum(kdiag[:, None] * w**2)) / (n - 1)
    x_term = (np.einsum("ij,ji->", k_gram, w) - np.sum(kdiag * np.diag(w))) / (n - 1)
    return 0.5 * float(s_term) - float(x_term)


def _cond_mmd_side_grad_w(k_gram: np.ndarray, w: np.ndarray) -> np.ndarray:
    n = k_gram.shape[0]
    kdiag = np.diag(k_gram)
    d_self = (k_gram @ w - kdiag[:, None] * w) / (n - 1)
    d_cross = (k_gram.T - np.diag(kdiag)) / (n - 1)
    return d_self - d_cross


def _softmax_col_vjp(w: np.ndarray, dw: np.ndarray) -> np.ndarray:
    # per-column softmax Jacobian transpose applied to dw
    return w * (dw - np.sum(dw * w, axis=0, keepdims=True))


def cond_mmd_from_grams(s, k_u: np.ndarray, k_v: np.ndarray, lam_u: float, lam_v: float) -> float:
    """Conditional MMD loss from explicit Gram matrices and a score matrix.

    The u side weights each u candidate by the column softmax of s (given
    v^i); the v side mirrors with the row softmax. The Grams are treated as
    score-independent, so cond_mmd_grad_scores is the exact derivative.
    """
    arr = _square_scores(s)
    val = 0.0
    if lam_u:
        val += lam_u * _cond_mmd_side(k_u, softmax(arr, axis=0))
    if lam_v:
        val += lam_v * _cond_mmd_side(k_v, softmax(arr.T, axis=0))
    return float(val)


def cond_mmd_grad_scores(s, k_u, k_v, lam_u: float, lam_v: float) -> np.ndarray:
    arr = _square_scores(s)
    g = np.zeros_like(arr)
    if lam_u:
        w = softmax(arr, axis=0)
        g += lam_u * _softmax_col_vjp(w, _cond_mmd_side_grad_w(k_u, w))
    if lam_v:
        w = softmax(arr.T, axis=0)
        g += lam_v * _softmax_col_vjp(w, _cond_mmd_side_grad_w(k_v, w)).T
    return g


def loss_cond_mmd(e_u, e_v, kernel: Kernel, lam_u, lam_v, tilting: str, tau: float) -> float:
    """Self-contained conditional MMD: kernel Grams and tilting scores both
    computed from the given batches."""
    s = similarity_matrix(e_u, e_v, tilting, tau)
    k_u = kernel_gram(kernel, e_u)
    k_v = kernel_gram(kernel, e_v)
    return cond_mmd_from_grams(s, k_u, k_v, lam_u, lam_v)


def joint_mmd_weights(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if np.all(np.isneginf(scores)):
        raise ValueError("degenerate weights: all scores are -inf")
    return softmax(scores)


def loss_joint_mmd(z, z_tilde, scores, kernel: Kernel) -> float:
    """MMD-squared surrogate between a paired batch z and a product batch
    z_tilde carrying self-normalized tilting weights softmax(scores):
    -2 sum_j w_j mean_i k(z_i, zt_j) + sum_{j,j'} w_j w_j' k(zt_j, zt_j').
    The z-z self term is weight-free and dropped.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[0] < 2:
        raise ValueError("need a paired batch of at least 2")
    w = joint_mmd_weights(scores)
    z_tilde = np.atleast_2d(np.asarray(z_tilde, dtype=np.float64))
    if w.size != z_tilde.shape[0]:
        raise ValueError("one score per product-batch row required")
    cross_means = kernel_gram(kernel, z, z_tilde).mean(axis=0)
    g_tt = kernel_gram(kernel, z_tilde)
    return float(-2.0 * w @ cross_means + w @ g_tt @ w)


def joint_mmd_grad_scores(z, z_tilde, scores, kernel: Kernel) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    z_tilde = np.atleast_2d(np.asarray(z_tilde, dtype=np.float64))
    w = joint_mmd_weights(scores)
    cross_means = kernel_gram(kernel, z, z_tilde).mean(axis=0)
    g_tt = kernel_gram(kernel, z_tilde)
    dw = -2.0 * cross_means + 2.0 * g_tt @ w
    g = w * (dw - float(dw @ w))
    return g.reshape(np.asarray(scores).shape)


def product_batch(u, v) -> tuple[np.ndarray, np.ndarray]:
    """Paired rows z_i = (u_i, v_i) and all N^2 product pairs zt, ordered
    u-major so zt[i*N + j] = (u_i, v_j) lines up with a flattened score
    matrix."""
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    if u.shape[0] != v.shape[0]:
        raise ValueError("paired batches must have equal length")
    n = u.shape[0]
    z = np.hstack([u, v])
    zt = np.hstack([np.repeat(u, n, axis=0), np.tile(v, (n, 1))])
    return z, zt


def loss_value_and_grad(kind: LossKind, s: SimilarityBatch, u_batch=None, v_batch=None):
    """Dispatch for the training loop: loss value and the exact cotangent on
    the score matrix.

    The joint variant realizes the product batch as all N^2 pairings of the
    current batch (diagonal included), so its negatives reuse s itself. The
    MMD variants compute kernel Grams on the raw data batches (u_batch,
    v_batch), which keeps those Grams parameter-free.
    """
    arr = _square_scores(s)
    n = arr.shape[0]
    if kind.variant in ("clip", "cond"):
        lse_col, p_col = _axis_lse_softmax(arr, 0)
        lse_row, p_row = _axis_lse_softmax(arr, 1)
        if kind.variant == "clip":
            return _clip_value(arr, lse_col, lse_row), _cond_grad(arr, p_col, p_row, 1.0, 1.0)
        value = _cond_value(arr, lse_col, lse_row, kind.lam_u, kind.lam_v)
        return value, _cond_grad(arr, p_col, p_row, kind.lam_u, kind.lam_v)
    if kind.variant == "joint":
        pos = np.diag(arr)
        value = loss_joint(pos, arr)
        g_pos, g_neg = grad_joint(pos, arr)
        ds = g_neg.copy()
        ds[np.diag_indices(n)] += g_pos
        return value, ds
    if u_batch is None or v_batch is None:
        raise ValueError(f"{kind.variant} needs the raw data batches for its kernel")
    if kind.variant == "cond_mmd":
        k_u = kernel_gram(kind.kernel, u_batch)
        k_v = kernel_gram(kind.kernel, v_batch)
        value = cond_mmd_from_grams(arr, k_u, k_v, kind.lam_u, kind.lam_v)
        return value, cond_mmd_grad_scores(arr, k_u, k_v, kind.lam_u, kind.lam_v)
    z, zt = product_batch(u_batch, v_batch)
    flat = arr.ravel()
    value = loss_joint_mmd(z, zt, flat, kind.kernel)
    ds = joint_mmd_grad_scores(z, zt, flat, kind.kernel).reshape(arr.shape)
    return value, ds
