"""Training objectives with analytic gradients.

The main objective is clustered contrastive learning over rendered features:
each sampled pixel is pulled toward the mean feature of its own patch cluster
and pushed from the other cluster means, with a per-cluster temperature that
balances cluster size and spread. The hierarchical variant extends the pull
to related patches level by level, decayed by lambda per level and clamped so
a deeper (less related) level can never incur less loss than the previous
level's worst case — this is what forces monotone similarity ordering.

Cluster means and temperatures are treated as constants (detached) in all
gradients: prototypes act as targets, which keeps the optimization stable.
Only clusters actually present in a batch participate, as positives or in
softmax denominators.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Mapping

import numpy as np

from .hier2d import HierLevels

PHI_MIN = 0.05          # temperature floor; guards zero-variance clusters
CLUSTER_SMOOTHING = 10.0  # added inside log(n + smoothing) so tiny clusters stay tame


def cluster_stats(features, patch_of_sample, *, phi_min=PHI_MIN, smoothing=CLUSTER_SMOOTHING):
    """Per-cluster mean features and temperatures.

    The temperature of cluster i is the mean member distance to the cluster
    mean, scaled by 1/log(n_i + smoothing), floored at phi_min:
        phi_i = sum_j ||f_j - mean_i|| / (n_i * log(n_i + smoothing))
    """
    features = np.asarray(features, dtype=np.float64)
    pids = np.asarray(patch_of_sample)
    patch_ids, inverse = np.unique(pids, return_inverse=True)
    n_clusters = len(patch_ids)
    counts = np.bincount(inverse, minlength=n_clusters).astype(np.float64)
    means = np.zeros((n_clusters, features.shape[1]))
    np.add.at(means, inverse, features)
    means /= counts[:, None]
    spread = np.zeros(n_clusters)
    np.add.at(spread, inverse, np.linalg.norm(features - means[inverse], axis=1))
    temps = spread / (counts * np.log(counts + smoothing))
    temps = np.maximum(temps, phi_min)
    return patch_ids, means, temps


@dataclass
class ClusterBatch:
    """Rendered features of sampled pixels grouped into patch clusters.

    patch_ids are the distinct patch ids present (sorted); means/temperatures
    are indexed by position in patch_ids. cluster_of_sample maps each sample
    to that position.
    """

    features: np.ndarray
    patch_of_sample: np.ndarray
    patch_ids: np.ndarray
    cluster_of_sample: np.ndarray
    means: np.ndarray
    temperatures: np.ndarray

    @classmethod
    def build(cls, features, patch_of_sample, *, phi_min=PHI_MIN, smoothing=CLUSTER_SMOOTHING):
        features = np.asarray(features, dtype=np.float64)
        pids = np.asarray(patch_of_sample)
        if np.any(pids < 0):
            raise ValueError("batch contains null patch ids")
        patch_ids, means, temps = cluster_stats(features, pids, phi_min=phi_min, smoothing=smoothing)
        cluster_of_sample = np.searchsorted(patch_ids, pids)
        return cls(features, pids, patch_ids, cluster_of_sample, means, temps)

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_clusters(self) -> int:
        return len(self.patch_ids)

    def logits(self):
        """(N, P) similarity logits f_j . mean_k / phi_k and their log-softmax pieces."""
        scaled_means = self.means / self.temperatures[:, None]
        logits = self.features @ scaled_means.T
        mx = logits.max(axis=1, keepdims=True)
        lse = mx[:, 0] + np.log(np.exp(logits - mx).sum(axis=1))
        return logits, lse, scaled_means


def loss_cc(batch: ClusterBatch):
    """Clustered contrastive loss and its gradient w.r.t. batch features.

    -(1/P) * sum over samples of log softmax(sample against its own cluster),
    with P the number of clusters present in the batch.
    """
    logits, lse, scaled_means = batch.logits()
    n, p = logits.shape
    own = logits[np.arange(n), batch.cluster_of_sample]
    loss = float((lse - own).sum() / p)

    probs = np.exp(logits - lse[:, None])
    grad = probs @ scaled_means
    grad -= scaled_means[batch.cluster_of_sample]
    grad /= p
    return loss, grad


def loss_hier(batch: ClusterBatch, levels_by_anchor: Mapping[int, HierLevels], lam: float):
    """Hierarchical contrastive loss with per-level decay and ordering clamp.

    For each anchor cluster i and each of its hierarchy levels d (restricted
    to patches present in the batch), every sample of i incurs the contrastive
    loss against each level-d patch mean, clamped from below by the worst
    (maximal) loss of the previous level. Level terms are weighted by
    lam**(d-1) (0**0 == 1, so lam == 0 keeps exactly the depth-1 terms) and
    the whole sum is normalized by N * L with N the number of samples and L
    the number of contributing (anchor, depth) pairs.

    The clamp max(term, prev_max) routes gradient to the active branch only;
    when a level is empty in the batch the clamp carries over from the last
    computed level.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"decay must lie in [0, 1], got {lam}")
    logits, lse, scaled_means = batch.logits()
    n, p = logits.shape
    # L_terms[j, k]: contrastive loss of sample j against cluster k
    l_terms = lse[:, None] - logits

    pos = {int(pid): k for k, pid in enumerate(batch.patch_ids)}
    samples_of = [np.flatnonzero(batch.cluster_of_sample == k) for k in range(p)]

    # count contributing (anchor, depth) pairs first for the normalization
    filtered: list[tuple[int, list[tuple[int, np.ndarray]]]] = []
    n_pairs = 0
    for k, pid in enumerate(batch.patch_ids):
        lv = levels_by_anchor[int(pid)]
        levels_here: list[tuple[int, np.ndarray]] = []
        for d0, level in enumerate(lv.levels):
            members = np.array([pos[s] for s in level if s in pos], dtype=np.int64)
            if members.size:
                levels_here.append((d0, members))
                n_pairs += 1
        filtered.append((k, levels_here))
    if n_pairs == 0:
        return 0.0, np.zeros_like(batch.features)
    norm = 1.0 / (n * n_pairs)

    total = 0.0
    coef = np.zeros((n, p))  # gradient routing: how often each L_terms[j, k] is active
    for k, levels_here in filtered:
        rows = samples_of[k]
        if rows.size == 0:
            continue
        prev_max = np.full(rows.size, -np.inf)
        prev_arg = np.zeros(rows.size, dtype=np.int64)
        for d0, members in levels_here:
            weight = norm * lam ** d0  # 0**0 == 1: depth-1 terms survive lam == 0
            vals = l_terms[np.ix_(rows, members)]
            clamped = np.maximum(vals, prev_max[:, None])
            total += weight * clamped.sum()
            if weight != 0.0:
                active = vals >= prev_max[:, None]
                # active branch: gradient into L(s); else into the argmax of
                # the previous level
                np.add.at(coef, (np.repeat(rows, members.size)[active.ravel()],
                                 np.tile(members, rows.size)[active.ravel()]), weight)
                n_clamped = (~active).sum(axis=1)
                has = n_clamped > 0
                if has.any():
                    np.add.at(coef, (rows[has], prev_arg[has]), weight * n_clamped[has])
            # the next level clamps against this level's raw maximum
            arg_local = np.argmax(vals, axis=1)
            prev_arg = members[arg_local]
            prev_max = vals[np.arange(rows.size), arg_local]

    # dL_terms[j,k]/df_j = softmax-weighted mean minus scaled mean k
    probs = np.exp(logits - lse[:, None])
    grad = (coef.sum(axis=1, keepdims=True) * (probs @ scaled_means)) - coef @ scaled_means
    return float(total), grad


def loss_norm(features):
    """Mean squared deviation of feature norms from one."""
    features = np.asarray(features, dtype=np.float64)
    n = len(features)
    norms = np.linalg.norm(features, axis=1)
    loss = float(((norms - 1.0) ** 2).mean()) if n else 0.0
    safe = np.where(norms > 0, norms, 1.0)
    grad = (2.0 / max(n, 1)) * ((norms - 1.0) / safe)[:, None] * features
    return loss, grad


def loss_color(rendered, target):
    """Mean per-ray squared color error."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    n = len(rendered)
    diff = rendered - target
    loss = float((diff ** 2).sum() / max(n, 1))
    return loss, (2.0 / max(n, 1)) * diff


def loss_opacity(opacity, eps=1e-6):
    """Entropy-style regularizer pushing each ray to saturated or empty."""
    opacity = np.asarray(opacity, dtype=np.float64)
    n = len(opacity)
    o = np.clip(opacity, eps, 1.0)
    loss = float((-o * np.log(o)).mean()) if n else 0.0
    inside = (opacity > eps) & (opacity < 1.0)
    grad = np.where(inside, -(np.log(o) + 1.0), 0.0) / max(n, 1)
    return loss, grad


@dataclass
class LossBreakdown:
    """Per-step loss components; total = l_color + w1*l_main + w2*l_norm + w3*l_opacity."""

    l_main: float
    l_norm: float
    l_color: float
    l_opacity: float
    w1: float
    w2: float
    w3: float
    total: float = dc_field(init=False)
    gradients: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.total = self.l_color + self.w1 * self.l_main + self.w2 * self.l_norm + self.w3 * self.l_opacity

    def log_line(self, step: int, lr: float) -> str:
        return (
            f"{step} {self.l_color:.9g} {self.l_main:.9g} {self.l_norm:.9g} "
            f"{self.l_opacity:.9g} {self.total:.9g} {lr:.9g}"
        )


LOG_COLUMNS = "step l_color l_main l_norm l_opacity total lr"


def total_loss(l_main, l_norm_val, l_color_val, l_opacity_val, w1, w2, w3) -> LossBreakdown:
    return LossBreakdown(
        l_main=float(l_main),
        l_norm=float(l_norm_val),
        l_color=float(l_color_val),
        l_opacity=float(l_opacity_val),
        w1=w1,
        w2=w2,
        w3=w3,
    )
