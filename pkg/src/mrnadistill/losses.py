"""Distillation losses and the diagnostic metric suite.

Losses (cosine, MSE, their weighted combination, KL for the logit
ablation) are differentiable: they build tape-recorded graphs through
`mrnadistill.tensor` so the trainer can backprop them.  The diagnostics
(linear CKA, embedding variance, PCA explained-variance counts, entropy
profiles) are plain numpy evaluated at float64.

Weight decay is NOT part of the differentiated loss: it is applied as
decoupled decay inside the AdamW step, equivalent to the lambda_wd
penalty up to optimizer coupling.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DegenerateInputError, ShapeError

PCA_THRESHOLDS = (0.50, 0.75, 0.90, 0.95, 0.99)


@dataclass
class LossWeights:
    lambda_cos: float = 1.0
    lambda_mse: float = 0.1
    weight_decay: float = 1e-2
    temperature: float = 1.0

    def __post_init__(self):
        if min(self.lambda_cos, self.lambda_mse, self.weight_decay, self.temperature) < 0:
            raise ContractError("loss weights must be non-negative")
        if self.lambda_cos < self.lambda_mse:
            warnings.warn("lambda_cos < lambda_mse: directional alignment no longer dominates")


def cosine_loss(student_up, teacher, eps: float = 1e-12) -> T.Tensor:
    """Mean over rows of 1 - cos(student_up, teacher); range [0, 2]."""
    s = T.as_tensor(student_up)
    t = np.asarray(teacher.data if isinstance(teacher, T.Tensor) else teacher)
    if s.data.shape != t.shape or s.data.ndim not in (1, 2):
        raise ShapeError(f"cosine_loss shapes differ: {s.data.shape} vs {t.shape}")
    if s.data.ndim == 1:
        s = T.reshape(s, (1, -1))
        t = t[None]
    shat = T.l2_normalize(s, eps)
    that = _unit_rows(t, eps).astype(s.data.dtype)
    dots = T.tsum(T.mul(shat, that), axis=-1)
    return T.add_scalar(T.scale(T.tmean(dots), -1.0), 1.0)


def _unit_rows(x: np.ndarray, eps: float) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    return x / np.maximum(norms, eps)


def mse_loss(student_up, teacher) -> T.Tensor:
    """Mean squared elementwise difference (mean over rows and dims)."""
    s = T.as_tensor(student_up)
    t = np.asarray(teacher.data if isinstance(teacher, T.Tensor) else teacher)
    if s.data.shape != t.shape:
        raise ShapeError(f"mse_loss shapes differ: {s.data.shape} vs {t.shape}")
    diff = T.sub(s, T.Tensor(t.astype(s.data.dtype)))
    return T.tmean(T.mul(diff, diff))


def train_loss(pairs, weights: LossWeights) -> tuple[T.Tensor, dict[str, float]]:
    """Weighted cosine+MSE distillation loss averaged over matched taps.

    `pairs` is one (student_projected, teacher_target) pair per tap.
    Returns the scalar loss tensor and a per-tap breakdown for logging.
    The weight-decay term lives in the optimizer, not here.
    """
    pairs = list(pairs)
    if not pairs:
        raise ContractError("train_loss requires at least one (student, teacher) pair")
    breakdown: dict[str, float] = {}
    cos_terms, mse_terms = [], []
    for i, (s_up, target) in enumerate(pairs, start=1):
        c = cosine_loss(s_up, target)
        m = mse_loss(s_up, target)
        breakdown[f"cos_tap{i}"] = c.item()
        breakdown[f"mse_tap{i}"] = m.item()
        cos_terms.append(c)
        mse_terms.append(m)

    def mean_terms(terms):
        acc = terms[0]
        for t in terms[1:]:
            acc = T.add(acc, t)
        return T.scale(acc, 1.0 / len(terms))

    loss = T.add(T.scale(mean_terms(cos_terms), weights.lambda_cos),
                 T.scale(mean_terms(mse_terms), weights.lambda_mse))
    breakdown["cos_mean"] = float(np.mean([breakdown[f"cos_tap{i}"] for i in range(1, len(pairs) + 1)]))
    breakdown["mse_mean"] = float(np.mean([breakdown[f"mse_tap{i}"] for i in range(1, len(pairs) + 1)]))
    return loss, breakdown


def kl_loss(teacher_logits, student_logits, mask=None, temperature: float = 1.0) -> T.Tensor:
    """KL(p_t || p_s) with p = softmax(logits / temperature), averaged
    over unmasked positions."""
    t = np.asarray(teacher_logits.data if isinstance(teacher_logits, T.Tensor) else teacher_logits,
                   dtype=np.float64)
    s = T.as_tensor(student_logits)
    if t.shape != s.data.shape or t.ndim not in (2, 3):
        raise ShapeError(f"kl_loss shapes differ: teacher {t.shape} vs student {s.data.shape}")
    if t.ndim == 2:
        t = t[None]
        s = T.reshape(s, t.shape)
        if mask is not None and np.asarray(mask).ndim == 1:
            mask = np.asarray(mask)[None]
    if mask is None:
        mask = np.ones(t.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != t.shape[:2]:
        raise ShapeError(f"kl_loss mask {mask.shape} does not match logits {t.shape}")
    n_masked = int(mask.sum())
    if n_masked == 0:
        raise ContractError("kl_loss requires at least one unmasked position")

    tz = t / temperature
    tz = tz - tz.max(axis=-1, keepdims=True)
    log_pt = tz - np.log(np.exp(tz).sum(axis=-1, keepdims=True))
    pt = np.exp(log_pt)
    const = float((pt * log_pt).sum(axis=-1)[mask].sum() / n_masked)

    log_ps = T.log_softmax(T.scale(s, 1.0 / temperature), axis=-1)
    weighted = T.mul(log_ps, pt.astype(s.data.dtype))
    per_pos = T.tsum(weighted, axis=-1)
    masked = T.mul(per_pos, mask.astype(s.data.dtype))
    cross = T.tsum(masked)
    return T.add_scalar(T.scale(cross, -1.0 / n_masked), const)


# ---------------------------------------------------------------------------
# diagnostics (plain numpy, float64)
# ---------------------------------------------------------------------------

@dataclass
class EntropyProfile:
    entropy: np.ndarray            # nats per position
    mean: float
    max: float
    spikes: list[int]              # positions with H > mean + 2*std
    mean_token_prob: float         # exp(-mean entropy)
    uniform_entropy: float         # log V baseline
    uniform_prob: float            # 1 / V baseline


def entropy_profile(logits, mask=None) -> EntropyProfile:
    """Per-position Shannon entropy (nats) of softmaxed logits [L, V]."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] < 2:
        raise ContractError(f"entropy_profile expects [L, V>=2] logits, got {z.shape}")
    if mask is None:
        mask = np.ones(z.shape[0], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    zs = z - z.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    entropy = -(p * logp).sum(axis=1)
    sel = entropy[mask]
    if sel.size == 0:
        raise ContractError("entropy_profile requires at least one unmasked position")
    mean = float(sel.mean())
    std = float(sel.std())
    spikes = [int(i) for i in np.nonzero(mask & (entropy > mean + 2.0 * std))[0]]
    v = z.shape[1]
    return EntropyProfile(
        entropy=entropy,
        mean=mean,
        max=float(sel.max()),
        spikes=spikes,
        mean_token_prob=float(np.exp(-mean)),
        uniform_entropy=float(np.log(v)),
        uniform_prob=1.0 / v,
    )


def batch_entropy_profile(logits, mask) -> np.ndarray:
    """Positionwise mean entropy over a batch [B, L, V] (masked rows only)."""
    z = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    zs = z - z.max(axis=-1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=-1, keepdims=True))
    h = -(np.exp(logp) * logp).sum(axis=-1)  # [B, L]
    counts = np.maximum(mask.sum(axis=0), 1)
    return (h * mask).sum(axis=0) / counts


def linear_cka(x, y, centered: bool = True) -> float:
    """Linear CKA between two representation matrices with shared rows.

    Columns are centered before the Frobenius forms unless `centered` is
    False (the raw variant is logged alongside for comparability).
    """
    X = np.asarray(x, dtype=np.float64)
    Y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
        raise ShapeError(f"linear_cka needs matching row counts, got {X.shape} and {Y.shape}")
    if X.shape[0] < 2:
        raise ContractError("linear_cka requires n >= 2 rows")
    if centered:
        X = X - X.mean(axis=0)
        Y = Y - Y.mean(axis=0)
    num = np.linalg.norm(X.T @ Y) ** 2
    den = np.linalg.norm(X.T @ X) * np.linalg.norm(Y.T @ Y)
    if den == 0.0:
        raise DegenerateInputError("linear_cka: a centered input is all-zero")
    return float(num / den)


def embedding_variance(e) -> float:
    """Mean over dimensions of the per-dimension population variance."""
    E = np.asarray(e, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] < 2:
        raise ContractError(f"embedding_variance needs an [n>=2, d] matrix, got {E.shape}")
    return float(E.var(axis=0).mean())


@dataclass
class PCAResult:
    eigenvalues: np.ndarray             # descending
    components_at: dict[float, int]     # threshold -> smallest component count


def pca_components(e, thresholds=PCA_THRESHOLDS) -> PCAResult:
    """Principal-component counts needed to reach explained-variance
    thresholds; columns are centered, eigenvalues come from the SVD of
    the centered matrix (ratios are divisor-independent)."""
    E = np.asarray(e, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] < 2:
        raise ContractError(f"pca_components needs an [n>=2, d] matrix, got {E.shape}")
    X = E - E.mean(axis=0)
    svals = np.linalg.svd(X, compute_uv=False)
    eig = (svals * svals) / E.shape[0]
    total = eig.sum()
    if total == 0.0:
        raise DegenerateInputError("pca_components: centered data is all-zero")
    return PCAResult(eigenvalues=eig, components_at=components_from_eigenvalues(eig, thresholds))


def components_from_eigenvalues(eigenvalues, thresholds=PCA_THRESHOLDS) -> dict[float, int]:
    """Smallest k per threshold with cumulative eigenvalue ratio >= t."""
    eig = np.asarray(eigenvalues, dtype=np.float64)
    if np.any(eig < -1e-12 * max(eig.max(initial=0.0), 1.0)):
        raise ContractError("eigenvalues must be non-negative")
    eig = np.maximum(eig, 0.0)
    order = np.sort(eig)[::-1]
    cum = np.cumsum(order) / order.sum()
    return {float(t): int(np.searchsorted(cum, t - 1e-15) + 1) for t in thresholds}
