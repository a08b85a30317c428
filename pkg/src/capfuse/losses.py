"""Contrastive training objectives and their analytic gradients.

Two pieces: the standard bidirectional image/text contrastive loss over
the in-batch cosine-similarity matrix, and a class-supervised variant
that treats every same-class off-diagonal pair as a positive. The final
objective is a convex combination of the two. Gradients with respect to
the raw (pre-normalization) embeddings are returned alongside every
loss so the trainer never needs autograd; a central finite-difference
checker validates them.

Conventions (fixed here, configurable where noted):

* The supervised term uses ``exp(S_ij / tau_sup)`` with ``tau_sup = 1``
  by default, i.e. no temperature, and its denominator sums over all k
  including k = i; only the numerator mask excludes the diagonal.
* The supervised term is image-to-text (rows of S) by default;
  ``direction="symmetric"`` averages the row-wise and column-wise
  versions.
* Rows with no same-class partner are dropped from the supervised
  average; if no row has one, the supervised loss is 0 with zero
  gradient (all-distinct batches still train on the standard term).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimMismatch, ShapeMismatch
from .linalg import as_f64, normalize_rows


@dataclass(frozen=True)
class LossConfig:
    """Weights and temperatures for the combined objective.

    w:        weight on the supervised term, in [0, 1].
    tau_std:  temperature of the standard loss (0.07, CLIP's converged
              logit scale; the trainer can also learn it as a scalar).
    tau_sup:  temperature of the supervised loss (1.0 reproduces the
              plain exp(S) formulation).
    direction: "img_to_txt" or "symmetric" for the supervised term.
    """

    w: float = 0.2
    tau_std: float = 0.07
    tau_sup: float = 1.0
    direction: str = "img_to_txt"

    def __post_init__(self):
        if not 0.0 <= self.w <= 1.0:
            raise ValueError(f"w must be in [0, 1], got {self.w}")
        if self.tau_std <= 0 or self.tau_sup <= 0:
            raise ValueError("temperatures must be positive")
        if self.direction not in ("img_to_txt", "symmetric"):
            raise ValueError(f"unknown direction {self.direction!r}")


@dataclass(frozen=True)
class MaskPair:
    """Same-class mask M, its diagonal-free version, and the valid rows.

    m[i, j] = 1 iff labels[i] == labels[j]; m_hat = m - I; valid holds
    the indices i with at least one off-diagonal positive.
    """

    m: np.ndarray
    m_hat: np.ndarray
    valid: np.ndarray


@dataclass(frozen=True)
class LossBreakdown:
    l_i: float
    l_t: float
    l_std: float
    l_sup: float
    total: float


@dataclass
class LossResult:
    breakdown: LossBreakdown
    grad_img: np.ndarray
    grad_txt: np.ndarray
    # d(total)/d(log logit-scale) where the standard-loss logits are
    # exp(scale) * S; used by the trainer's learnable-temperature mode.
    grad_log_scale: float = field(default=0.0)


def build_mask(labels) -> MaskPair:
    labels = np.asarray(labels)
    m = (labels[:, None] == labels[None, :]).astype(np.float64)
    m_hat = m - np.eye(len(labels))
    valid = np.flatnonzero(m_hat.sum(axis=1) > 0)
    return MaskPair(m=m, m_hat=m_hat, valid=valid)


def _check_batch(img, txt, labels=None):
    img = np.atleast_2d(as_f64(img))
    txt = np.atleast_2d(as_f64(txt))
    if img.shape[0] != txt.shape[0]:
        raise ShapeMismatch(f"{img.shape[0]} images vs {txt.shape[0]} texts")
    if img.shape[1] != txt.shape[1]:
        raise DimMismatch(f"dim {img.shape[1]} vs {txt.shape[1]}")
    if labels is not None and len(labels) != img.shape[0]:
        raise ShapeMismatch(f"{len(labels)} labels for {img.shape[0]} pairs")
    return img, txt


def _logsumexp_rows(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return m + np.log(np.exp(z - m).sum(axis=1, keepdims=True))


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _std_parts(s: np.ndarray, tau: float):
    """Both directions of the standard loss on similarity matrix s.

    Returns (l_i, l_t, g) where g = d((l_i + l_t)/2)/ds.
    """
    n = s.shape[0]
    z = s / tau
    diag = np.diag(z)
    l_i = float(np.mean(_logsumexp_rows(z)[:, 0] - diag))
    l_t = float(np.mean(_logsumexp_rows(z.T)[:, 0] - diag))
    p = _softmax_rows(z)        # image -> text, rows
    q = _softmax_rows(z.T).T    # text -> image, columns
    eye = np.eye(n)
    g = ((p - eye) + (q - eye)) / (2.0 * n * tau)
    return l_i, l_t, g


def _sup_parts_rows(s: np.ndarray, mask: MaskPair, tau: float):
    """Row-direction supervised loss on s. Returns (l_sup, g = dl/ds)."""
    valid = mask.valid
    if valid.size == 0:
        return 0.0, np.zeros_like(s)
    z = s / tau
    log_p = z - _logsumexp_rows(z)
    r = mask.m_hat.sum(axis=1)
    per_row = -(mask.m_hat * log_p).sum(axis=1)
    l_sup = float(np.mean(per_row[valid] / r[valid]))
    g = np.zeros_like(s)
    p = np.exp(log_p)
    g[valid] = (p[valid] - mask.m_hat[valid] / r[valid, None]) / (valid.size * tau)
    return l_sup, g


def _sup_parts(s: np.ndarray, mask: MaskPair, tau: float, direction: str):
    l_rows, g_rows = _sup_parts_rows(s, mask, tau)
    if direction == "img_to_txt":
        return l_rows, g_rows
    # m is symmetric, so the same mask applies to the transposed matrix.
    l_cols, g_cols = _sup_parts_rows(s.T, mask, tau)
    return (l_rows + l_cols) / 2.0, (g_rows + g_cols.T) / 2.0


def _grad_through_norm(raw: np.ndarray, unit: np.ndarray, g_unit: np.ndarray) -> np.ndarray:
    """Backprop row-wise L2 normalization: u_hat = u / ||u||."""
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    dots = (g_unit * unit).sum(axis=1, keepdims=True)
    return (g_unit - dots * unit) / norms


def _embedding_grads(img, txt, u, v, g_s):
    g_img = _grad_through_norm(img, u, g_s @ v)
    g_txt = _grad_through_norm(txt, v, g_s.T @ u)
    return g_img, g_txt


def std_loss(img, txt, tau_std: float = 0.07):
    """Standard bidirectional contrastive loss.

    Returns (l_i, l_t, l_std, grad_img, grad_txt); gradients are of
    l_std with respect to the raw embeddings.
    """
    img, txt = _check_batch(img, txt)
    u, v = normalize_rows(img), normalize_rows(txt)
    s = u @ v.T
    l_i, l_t, g_s = _std_parts(s, tau_std)
    g_img, g_txt = _embedding_grads(img, txt, u, v, g_s)
    return l_i, l_t, (l_i + l_t) / 2.0, g_img, g_txt


def sup_loss(img, txt, labels, tau_sup: float = 1.0, direction: str = "img_to_txt"):
    """Class-supervised contrastive loss.

    Returns (l_sup, grad_img, grad_txt). l_sup is 0 with zero gradients
    when no row has a same-class partner.
    """
    img, txt = _check_batch(img, txt, labels)
    mask = build_mask(labels)
    u, v = normalize_rows(img), normalize_rows(txt)
    s = u @ v.T
    l_sup, g_s = _sup_parts(s, mask, tau_sup, direction)
    g_img, g_txt = _embedding_grads(img, txt, u, v, g_s)
    return l_sup, g_img, g_txt


def combined_loss(img, txt, labels, cfg: LossConfig) -> LossResult:
    """Weighted combination: total = (1 - w) * l_std + w * l_sup.

    At w = 0 the value and gradient equal the standard loss exactly
    (no arithmetic with the supervised term), and symmetrically at
    w = 1, so the endpoints reproduce the pure objectives bit-for-bit.
    """
    img, txt = _check_batch(img, txt, labels)
    mask = build_mask(labels)
    u, v = normalize_rows(img), normalize_rows(txt)
    s = u @ v.T

    l_i, l_t, g_std = _std_parts(s, cfg.tau_std)
    l_std = (l_i + l_t) / 2.0
    l_sup, g_sup = _sup_parts(s, mask, cfg.tau_sup, cfg.direction)

    if cfg.w == 0.0:
        total, g_s = l_std, g_std
    elif cfg.w == 1.0:
        total, g_s = l_sup, g_sup
    else:
        total = (1.0 - cfg.w) * l_std + cfg.w * l_sup
        g_s = (1.0 - cfg.w) * g_std + cfg.w * g_sup

    g_img, g_txt = _embedding_grads(img, txt, u, v, g_s)
    # With logits z = exp(log_scale) * S, d l_std / d log_scale is
    # sum(dl/dz * z); only the standard term depends on tau_std.
    g_scale = (1.0 - cfg.w) * float((g_std * s).sum()) if cfg.w < 1.0 else 0.0
    breakdown = LossBreakdown(l_i=l_i, l_t=l_t, l_std=l_std, l_sup=l_sup, total=total)
    return LossResult(breakdown=breakdown, grad_img=g_img, grad_txt=g_txt,
                      grad_log_scale=g_scale)


def finite_diff_check(img, txt, labels, cfg: LossConfig, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference grads.

    Perturbs every coordinate of both towers; error per coordinate is
    |analytic - numeric| / max(1, |numeric|).
    """
    if not 1e-7 <= h <= 1e-3:
        raise ValueError(f"h {h} outside [1e-7, 1e-3]")
    img = np.atleast_2d(as_f64(img)).copy()
    txt = np.atleast_2d(as_f64(txt)).copy()
    res = combined_loss(img, txt, labels, cfg)
    worst = 0.0
    for arr, grad in ((img, res.grad_img), (txt, res.grad_txt)):
        flat = arr.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            f_plus = combined_loss(img, txt, labels, cfg).breakdown.total
            flat[k] = orig - h
            f_minus = combined_loss(img, txt, labels, cfg).breakdown.total
            flat[k] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(grad.reshape(-1)[k] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
