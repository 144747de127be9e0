"""Transductive estimation of diagonal-Gaussian prototype distributions and
their Bayesian fusion via the closed-form product of Gaussians.

The estimated variances are floored at ``EPSILON_VARIANCE``. The floor
matters: with a single labeled support and near-one-hot responsibilities the
weighted variance collapses to zero, which would make the Gaussian product
degenerate; flooring keeps fusion well-defined in exactly the 1-shot regime
this pipeline targets. The product's normalizing constant is never computed
because only the posterior mean and variance are consumed downstream.

The internal ``_`` helpers are generic over plain ndarrays and autodiff
Nodes, so the episodic training loss can differentiate straight through the
fusion arithmetic (responsibilities included).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

EPSILON_VARIANCE = 1e-6

DEFAULT_LAMBDA = 10.0  # fixed softmax sharpness for soft assignment


@dataclass
class DiagonalGaussian:
    """Mean vector plus per-dimension variance vector."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.variance = np.asarray(self.variance, dtype=np.float64)
        if self.mean.ndim != 1 or self.mean.shape != self.variance.shape:
            raise ValueError("mean and variance must be matching vectors")
        if not (np.isfinite(self.mean).all() and np.isfinite(self.variance).all()):
            raise ValueError("mean and variance must be finite")
        if (self.variance <= 0).any():
            raise ValueError("variance must be strictly positive (apply a floor first)")

    @classmethod
    def from_moments(cls, mean, variance, floor: float = EPSILON_VARIANCE):
        """Construct with the variance floored at ``floor``."""
        return cls(np.asarray(mean, np.float64),
                   np.maximum(np.asarray(variance, np.float64), floor))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass
class SoftAssignment:
    """Responsibilities P(class | sample) for every sample of an episode.

    Labeled rows are exact one-hot vectors; unlabeled rows are softmax
    distributions over classes.
    """

    matrix: np.ndarray   # (num_samples, num_classes)
    labeled: np.ndarray  # (num_samples,) bool

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.labeled = np.asarray(self.labeled, dtype=bool)
        if self.matrix.ndim != 2 or self.labeled.shape != (self.matrix.shape[0],):
            raise ValueError("matrix rows and labeled flags must align")
        if (self.matrix < 0).any():
            raise ValueError("responsibilities must be nonnegative")
        sums = self.matrix.sum(axis=1)
        if np.abs(sums - 1.0).max() > 1e-9:
            raise ValueError("every responsibility row must sum to 1")
        lab = self.matrix[self.labeled]
        if lab.size and not np.isin(lab, (0.0, 1.0)).all():
            raise ValueError("labeled rows must be exact one-hot vectors")

    @property
    def num_classes(self) -> int:
        return self.matrix.shape[1]


def cosine_matrix(embeddings, prototypes):
    """Pairwise cosine similarities, rows = embeddings, columns = prototypes.

    ``prototypes`` may be a traced Node; embeddings are always constants.
    Raises on any zero-norm row, naming the offending sample or prototype.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("embeddings must be a (samples x d) matrix")
    pv = ad.value_of(prototypes)
    if pv.ndim != 2 or pv.shape[1] != x.shape[1]:
        raise ValueError(f"prototype matrix shape {pv.shape} does not match d={x.shape[1]}")
    x_norms = np.linalg.norm(x, axis=1)
    zero = np.flatnonzero(x_norms == 0.0)
    if zero.size:
        raise ValueError(f"zero-norm embedding at row {zero[0]}")
    p_norms_value = np.linalg.norm(pv, axis=1)
    zero = np.flatnonzero(p_norms_value == 0.0)
    if zero.size:
        raise ValueError(f"zero-norm prototype at position {zero[0]}")
    x_unit = x / x_norms[:, None]
    raw = ad.matmul(x_unit, ad.transpose(prototypes))
    p_norms = ad.sqrt(ad.sum(ad.mul(prototypes, prototypes), axis=1))
    return ad.div(raw, ad.reshape(p_norms, (1, pv.shape[0])))


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _soft_assign_matrix(embeddings, labels, prototypes, lam: float):
    """Generic responsibility matrix; traced when ``prototypes`` is a Node."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n_classes = ad.value_of(prototypes).shape[0]
    labeled_idx = np.flatnonzero(y >= 0)
    unlabeled_idx = np.flatnonzero(y < 0)
    parts = []
    if labeled_idx.size:
        parts.append(_one_hot(y[labeled_idx], n_classes))
    if unlabeled_idx.size:
        sims = cosine_matrix(x[unlabeled_idx], prototypes)
        parts.append(ad.softmax_rows(ad.mul(sims, lam)))
    full = parts[0] if len(parts) == 1 else ad.vstack(parts)
    order = np.concatenate([labeled_idx, unlabeled_idx])
    if np.array_equal(order, np.arange(y.size)):
        return full
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    return ad.take_rows(full, inverse)


def soft_assign(embeddings, labels, prototypes, lam: float = DEFAULT_LAMBDA) -> SoftAssignment:
    """Responsibilities over classes for every sample of an episode.

    ``labels`` holds the class position (0..N-1) for labeled samples and -1
    for unlabeled ones. Labeled rows become exact one-hot vectors; unlabeled
    rows are softmax(lam * cosine) over the prototype rows.
    """
    if not lam > 0:
        raise ValueError("lam must be positive")
    y = np.asarray(labels, dtype=np.int64)
    n_classes = np.asarray(prototypes).shape[0]
    if y.size and y.max(initial=-1) >= n_classes:
        raise ValueError("label refers to a class position beyond the prototype count")
    matrix = _soft_assign_matrix(embeddings, y, np.asarray(prototypes, np.float64), lam)
    return SoftAssignment(matrix, y >= 0)


def _weighted_moments(embeddings: np.ndarray, weights):
    """Weighted mean and population variance; ``weights`` may be a Node."""
    x = np.asarray(embeddings, dtype=np.float64)
    total = ad.sum(weights)
    mean = ad.div(ad.matmul(x.T, weights), total)
    diffs = ad.sub(x, mean)
    var = ad.div(ad.matmul(ad.transpose(ad.mul(diffs, diffs)), weights), total)
    return mean, var


def weighted_gaussian_estimate(embeddings, assignment: SoftAssignment, class_index: int,
                               floor: float = EPSILON_VARIANCE) -> DiagonalGaussian:
    """Responsibility-weighted mean and population variance for one class."""
    w = assignment.matrix[:, class_index]
    total = float(w.sum())
    if total <= 0.0:
        raise ValueError(f"zero total responsibility for class position {class_index}")
    mean, var = _weighted_moments(embeddings, w)
    return DiagonalGaussian.from_moments(mean, var, floor)


def _product_moments(prior_mean, prior_var, lik_mean, lik_var):
    """Closed-form moments of the product of two diagonal Gaussians."""
    denom = ad.add(prior_var, lik_var)
    mean = ad.div(ad.add(ad.mul(lik_var, prior_mean), ad.mul(prior_var, lik_mean)), denom)
    var = ad.div(ad.mul(prior_var, lik_var), denom)
    return mean, var


def gaussian_product(prior: DiagonalGaussian, likelihood: DiagonalGaussian) -> DiagonalGaussian:
    """Product of two diagonal Gaussians, as a (renormalized) Gaussian.

    Only the posterior mean/variance are returned; the scalar normalizer is
    irrelevant downstream and intentionally skipped.
    """
    if prior.dim != likelihood.dim:
        raise ValueError(f"dimension mismatch: {prior.dim} vs {likelihood.dim}")
    mean, var = _product_moments(prior.mean, prior.variance,
                                 likelihood.mean, likelihood.variance)
    return DiagonalGaussian(mean, var)


def mean_fuse(prototype, completed):
    """Plain elementwise average of the two prototype estimates (ablation mode)."""
    p = np.asarray(prototype, dtype=np.float64)
    q = np.asarray(completed, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    return (p + q) / 2.0


@dataclass
class FusionResult:
    fused: np.ndarray                 # (num_classes, d), the posterior means
    mean_based: list                  # DiagonalGaussian per class (likelihood side)
    completed: list                   # DiagonalGaussian per class (prior side)
    posterior: list                   # DiagonalGaussian per class
    assignment_mean: SoftAssignment
    assignment_completed: SoftAssignment


def fuse_prototypes(embeddings, labels, mean_prototypes, completed_prototypes,
                    lam: float = DEFAULT_LAMBDA,
                    floor: float = EPSILON_VARIANCE) -> FusionResult:
    """Full fusion pass over one episode's supports and queries.

    Soft-assigns all samples twice (once per prototype family), estimates a
    diagonal Gaussian per class from each assignment, and multiplies them
    with the completed-prototype Gaussian as the prior and the mean-based
    Gaussian as the likelihood. The fused prototype is the posterior mean.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    assign_mean = soft_assign(x, labels, mean_prototypes, lam)
    assign_comp = soft_assign(x, labels, completed_prototypes, lam)
    n_classes = assign_mean.num_classes
    mean_side, comp_side, posterior = [], [], []
    fused = np.empty((n_classes, x.shape[1]))
    for k in range(n_classes):
        g_mean = weighted_gaussian_estimate(x, assign_mean, k, floor)
        g_comp = weighted_gaussian_estimate(x, assign_comp, k, floor)
        post = gaussian_product(g_comp, g_mean)
        mean_side.append(g_mean)
        comp_side.append(g_comp)
        posterior.append(post)
        fused[k] = post.mean
    return FusionResult(fused, mean_side, comp_side, posterior, assign_mean, assign_comp)


def fused_means(embeddings, labels, mean_prototypes, completed_rows,
                lam: float = DEFAULT_LAMBDA, floor: float = EPSILON_VARIANCE):
    """Traced fusion for the episodic training loss.

    ``completed_rows`` is a list of per-class vectors (Nodes during training).
    The mean-prototype side involves no trainable quantity and is computed
    untraced; the completed side is differentiated through the soft
    assignment, the weighted moments, and the product formula. Returns one
    fused mean per class.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    assign_mean = _soft_assign_matrix(x, y, np.asarray(mean_prototypes, np.float64), lam)
    assign_comp = _soft_assign_matrix(x, y, ad.stack(completed_rows), lam)
    out = []
    for k in range(len(completed_rows)):
        mu_mean, var_mean = _weighted_moments(x, assign_mean[:, k])
        var_mean = np.maximum(var_mean, floor)
        mu_comp, var_comp = _weighted_moments(x, ad.col(assign_comp, k))
        var_comp = ad.maximum(var_comp, floor)
        mean, _ = _product_moments(mu_comp, var_comp, mu_mean, var_mean)
        out.append(mean)
    return out
