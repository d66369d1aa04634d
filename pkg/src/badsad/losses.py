"""DeepSAD objective and the two latent-poisoning terms (alignment, concentration).

All functions take diffcore tensors (or arrays, which are wrapped) and
return scalar tensors, so gradients flow back to the encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ConfigurationError, UsageError

POISON_ROUTES = ("labeled_normal", "unlabeled", "none")


@dataclass(frozen=True)
class LossWeights:
    eta: float = 1.0
    alpha: float = 5.0
    beta: float = 1.0
    margin: float = 2.0
    eps_inv: float = 1e-6
    lambda_wd: float = 1e-6
    pairing: str = "mean"

    def __post_init__(self):
        for name in ("eta", "alpha", "beta", "margin", "eps_inv", "lambda_wd"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigurationError(f"loss weight {name} must be finite")
        if self.eta <= 0:
            raise ConfigurationError(f"eta must be > 0, got {self.eta}")
        if min(self.alpha, self.beta, self.margin, self.lambda_wd) < 0:
            raise ConfigurationError("alpha, beta, margin and lambda_wd must be >= 0")
        if self.eps_inv < 0:
            raise ConfigurationError(f"eps_inv must be >= 0, got {self.eps_inv}")
        if self.pairing not in ("mean", "all_pairs"):
            raise ConfigurationError(f"pairing must be 'mean' or 'all_pairs', got {self.pairing!r}")


@dataclass
class BatchEmbeddings:
    """Latent rows of one composite batch, by group; a group may be None."""

    z_u: dc.Tensor | None = None
    z_ln: dc.Tensor | None = None
    z_la: dc.Tensor | None = None
    z_p: dc.Tensor | None = None


def _rows(z) -> int:
    return 0 if z is None else int(z.shape[0])


def _t(x):
    return None if x is None else dc.as_tensor(x)


def deepsad_loss(emb: BatchEmbeddings, c, weights: LossWeights, treat_poison_as: str = "labeled_normal") -> dc.Tensor:
    """Semi-supervised hypersphere loss with per-batch counts.

    (1/(n+m)) * sum_unlabeled |z-c|^2 + (eta/(n+m)) * sum_labeled (|z-c|^2 + eps)^y
    with y=+1 for labeled normal rows and y=-1 for labeled abnormal rows.
    eps guards only the reciprocal; the weight-decay term is handled by the
    optimizer.
    """
    if treat_poison_as not in POISON_ROUTES:
        raise ConfigurationError(f"treat_poison_as must be one of {POISON_ROUTES}")
    c = dc.as_tensor(c)
    unlabeled = [z for z in (_t(emb.z_u),) if z is not None and z.shape[0]]
    positive = [z for z in (_t(emb.z_ln),) if z is not None and z.shape[0]]
    negative = [z for z in (_t(emb.z_la),) if z is not None and z.shape[0]]
    z_p = _t(emb.z_p)
    if z_p is not None and z_p.shape[0]:
        if treat_poison_as == "labeled_normal":
            positive.append(z_p)
        elif treat_poison_as == "unlabeled":
            unlabeled.append(z_p)
    n = sum(_rows(z) for z in unlabeled)
    m = sum(_rows(z) for z in positive) + sum(_rows(z) for z in negative)
    if n + m == 0:
        raise UsageError("deepsad_loss needs at least one unlabeled or labeled row")

    scale = 1.0 / (n + m)
    terms = []
    for z in unlabeled:
        terms.append(dc.squared_l2_distance(z, c).sum() * scale)
    for z in positive:
        terms.append(dc.squared_l2_distance(z, c).sum() * (weights.eta * scale))
    for z in negative:
        dist = dc.squared_l2_distance(z, c) + weights.eps_inv
        terms.append((dist**-1.0).sum() * (weights.eta * scale))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def group_cosines(z_ln, z_p, z_la, pairing: str = "mean", eps: float = dc.DEFAULT_EPS_COS):
    """(cos(normal, abnormal), cos(normal, poisoned)) as scalar tensors."""
    z_ln, z_p, z_la = _t(z_ln), _t(z_p), _t(z_la)
    for name, z in (("labeled normal", z_ln), ("poisoned", z_p), ("labeled abnormal", z_la)):
        if z is None or z.shape[0] == 0:
            raise UsageError(f"alignment needs a nonempty {name} group")
    if pairing == "mean":
        n_bar, p_bar, a_bar = z_ln.mean(axis=0), z_p.mean(axis=0), z_la.mean(axis=0)
        return dc.cosine_similarity(n_bar, a_bar, eps), dc.cosine_similarity(n_bar, p_bar, eps)
    d = z_ln.shape[1]
    zn = dc.reshape(z_ln, (z_ln.shape[0], 1, d))
    cos_na = dc.cosine_similarity(zn, dc.reshape(z_la, (1, z_la.shape[0], d)), eps).mean()
    cos_np = dc.cosine_similarity(zn, dc.reshape(z_p, (1, z_p.shape[0], d)), eps).mean()
    return cos_na, cos_np


def alignment_loss(z_ln, z_p, z_la, margin: float = 2.0, pairing: str = "mean") -> dc.Tensor:
    """max(cos(n, a) - cos(n, p) + margin, 0) over group means (or all pairs)."""
    cos_na, cos_np = group_cosines(z_ln, z_p, z_la, pairing)
    return dc.relu(cos_na - cos_np + margin)


def concentration_loss(z_p, c_p, z_la, c_a) -> dc.Tensor:
    """Mean squared distance of poisoned rows to c_p plus that of abnormal rows to c_a."""
    z_p, z_la = _t(z_p), _t(z_la)
    if z_p is None or z_p.shape[0] == 0:
        raise UsageError("concentration needs a nonempty poisoned group")
    if z_la is None or z_la.shape[0] == 0:
        raise UsageError("concentration needs a nonempty labeled-abnormal group")
    return dc.squared_l2_distance(z_p, c_p).mean() + dc.squared_l2_distance(z_la, c_a).mean()


@dataclass
class LossParts:
    deepsad: dc.Tensor
    alignment: dc.Tensor | None
    concentration: dc.Tensor | None
    total: dc.Tensor


def total_loss(emb: BatchEmbeddings, centers, weights: LossWeights, treat_poison_as: str = "labeled_normal") -> LossParts:
    """deepsad + alpha * alignment + beta * concentration.

    ``centers`` is anything with ``c``, ``c_p`` and ``c_a`` attributes.
    """
    base = deepsad_loss(emb, centers.c, weights, treat_poison_as)
    da = alignment_loss(emb.z_ln, emb.z_p, emb.z_la, weights.margin, weights.pairing)
    dcn = concentration_loss(emb.z_p, centers.c_p, emb.z_la, centers.c_a)
    total = base + da * weights.alpha + dcn * weights.beta
    return LossParts(base, da, dcn, total)
