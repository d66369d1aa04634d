"""Anomaly scores, AUC/ASR, threshold selection and sweeps, trigger robustness, latent projection."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import NumericalError, UsageError
from .model import Centers, ModelState, encode
from .trigger import TriggerMask, apply_trigger

DEFAULT_RATIOS = tuple(round(0.1 * i, 1) for i in range(21))
PROJECTION_GROUPS = ("normal", "poisoned", "abnormal", "triggered_abnormal")
GROUP_COLORS = {"normal": "#1f77b4", "poisoned": "#2ca02c", "abnormal": "#d62728", "triggered_abnormal": "#ff7f0e"}


@dataclass(frozen=True)
class ScoreSet:
    normal: np.ndarray
    abnormal: np.ndarray
    source: str = ""

    def __post_init__(self):
        object.__setattr__(self, "normal", np.asarray(self.normal, dtype=np.float64))
        object.__setattr__(self, "abnormal", np.asarray(self.abnormal, dtype=np.float64))


@dataclass
class EvalReport:
    auc: float
    tau: float
    asr: float
    val_balanced_accuracy: float = float("nan")
    sweep: list[dict] = field(default_factory=list)
    robustness: dict[str, float] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


# -- scoring ------------------------------------------------------------------------


def anomaly_scores(state: ModelState, centers: Centers, images: np.ndarray) -> np.ndarray:
    """s(X) = |phi(X) - c|^2 per row, always against the normal center c."""
    z = encode(state, images).astype(np.float64)
    diff = z - np.asarray(centers.c, dtype=np.float64)
    return np.einsum("ij,ij->i", diff, diff)


def anomaly_score(state: ModelState, centers: Centers, image: np.ndarray) -> float:
    return float(anomaly_scores(state, centers, np.asarray(image)[None])[0])


def auc(scores: ScoreSet) -> float:
    """P(abnormal score > normal score) + 0.5 * P(tie), via mid-ranks."""
    n_norm, n_abn = len(scores.normal), len(scores.abnormal)
    if n_norm == 0 or n_abn == 0:
        raise UsageError("AUC needs nonempty normal and abnormal score lists")
    allv = np.concatenate([scores.normal, scores.abnormal])
    _, inverse, counts = np.unique(allv, return_inverse=True, return_counts=True)
    # twice the mid-rank of each distinct value, kept integral
    upper = np.cumsum(counts)
    twice_rank = 2 * upper - counts + 1
    twice_sum = int(twice_rank[inverse[n_norm:]].sum())
    twice_u = twice_sum - n_abn * (n_abn + 1)
    return (twice_u / 2) / (n_norm * n_abn)


def _balanced_accuracy(normal: np.ndarray, abnormal: np.ndarray, taus: np.ndarray) -> np.ndarray:
    """(TNR + TPR) / 2 under s > tau => abnormal, for every tau."""
    sn, sa = np.sort(normal), np.sort(abnormal)
    tnr = np.searchsorted(sn, taus, side="right") / len(sn)
    tpr = 1.0 - np.searchsorted(sa, taus, side="right") / len(sa)
    return (tnr + tpr) / 2


def _f1(normal, abnormal, taus):
    sn, sa = np.sort(normal), np.sort(abnormal)
    tp = len(sa) - np.searchsorted(sa, taus, side="right")
    fp = len(sn) - np.searchsorted(sn, taus, side="right")
    fn = len(sa) - tp
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)


def threshold_candidates(val: ScoreSet) -> np.ndarray:
    distinct = np.unique(np.concatenate([val.normal, val.abnormal]))
    mids = (distinct[:-1] + distinct[1:]) / 2
    return np.concatenate([[-np.inf], mids, [np.inf]])


def select_threshold(val: ScoreSet, criterion: str = "balanced_accuracy") -> tuple[float, float]:
    """Best midpoint threshold on validation scores; ties go to the smaller tau.

    Returns ``(tau, criterion value)``.
    """
    if len(val.normal) == 0 or len(val.abnormal) == 0:
        raise UsageError("threshold selection needs nonempty validation lists")
    cands = threshold_candidates(val)
    if criterion == "balanced_accuracy":
        vals = _balanced_accuracy(val.normal, val.abnormal, cands)
        # rank by the integer numerator tn * |abnormal| + tp * |normal| so that ties are exact
        sn, sa = np.sort(val.normal), np.sort(val.abnormal)
        tn = np.searchsorted(sn, cands, side="right")
        tp = len(sa) - np.searchsorted(sa, cands, side="right")
        key = tn.astype(np.int64) * len(sa) + tp.astype(np.int64) * len(sn)
    elif criterion == "f1":
        vals = key = _f1(val.normal, val.abnormal, cands)
    else:
        raise UsageError(f"unknown threshold criterion {criterion!r}")
    best = int(np.argmax(key))  # first maximum == smallest tau
    return float(cands[best]), float(vals[best])


def scaled_threshold(tau: float, ratio: float) -> float:
    if ratio == 0:
        return 0.0
    return tau * ratio


def asr_from_scores(triggered_scores: np.ndarray, tau: float) -> float:
    """Fraction of triggered abnormal scores classified normal (s <= tau)."""
    triggered_scores = np.asarray(triggered_scores)
    if len(triggered_scores) == 0:
        raise UsageError("ASR needs at least one triggered image")
    return float(np.count_nonzero(triggered_scores <= tau)) / len(triggered_scores)


def asr(state: ModelState, centers: Centers, tau: float, abnormal_images: np.ndarray, trigger: TriggerMask) -> float:
    if len(abnormal_images) == 0:
        raise UsageError("ASR needs at least one abnormal image")
    triggered = apply_trigger(np.asarray(abnormal_images), trigger)
    return asr_from_scores(anomaly_scores(state, centers, triggered), tau)


def threshold_sweep(
    state: ModelState,
    centers: Centers,
    tau: float,
    test_normal: np.ndarray,
    test_abnormal: np.ndarray,
    asr_abnormal: np.ndarray,
    trigger: TriggerMask,
    ratios=DEFAULT_RATIOS,
) -> list[dict]:
    test = ScoreSet(anomaly_scores(state, centers, test_normal), anomaly_scores(state, centers, test_abnormal))
    trig = anomaly_scores(state, centers, apply_trigger(np.asarray(asr_abnormal), trigger))
    return sweep_from_scores(test, trig, tau, ratios)


def sweep_from_scores(test: ScoreSet, triggered_scores: np.ndarray, tau: float, ratios=DEFAULT_RATIOS) -> list[dict]:
    ratios = list(ratios)
    if not ratios:
        raise UsageError("threshold sweep needs at least one ratio")
    if min(ratios) < 0:
        raise UsageError("threshold ratios must be >= 0")
    a = auc(test)
    return [
        {"ratio": float(r), "tau": scaled_threshold(tau, r), "auc": a, "asr": asr_from_scores(triggered_scores, scaled_threshold(tau, r))}
        for r in sorted(ratios)
    ]


def robustness_eval(state: ModelState, centers: Centers, tau: float, asr_abnormal: np.ndarray, trigger: TriggerMask) -> dict[str, float]:
    """ASR under the full training trigger, its lower-right sub-trigger, and a distinct centred trigger."""
    full = trigger.with_kind("corner4")
    sub = trigger.with_kind("sub_lower_right")
    distinct = trigger.with_kind("distinct_center")
    if np.any(sub.mask > full.mask):
        raise UsageError("sub-trigger is not contained in the full trigger")
    return {
        "full": asr(state, centers, tau, asr_abnormal, full),
        "sub": asr(state, centers, tau, asr_abnormal, sub),
        "distinct": asr(state, centers, tau, asr_abnormal, distinct),
    }


# -- projection ----------------------------------------------------------------------


def _deflate(v: np.ndarray, found) -> np.ndarray:
    for u in found:
        v = v - (v @ u) * u
    return v


def _power_iteration(cov: np.ndarray, start: np.ndarray, found, tol: float, max_iter: int):
    """Power iteration kept orthogonal to ``found``.

    Stops once the Rayleigh quotient changes by less than ``tol`` relative.
    """
    v = _deflate(start, found)
    norm = np.linalg.norm(v)
    if norm < 1e-12:
        return None
    v = v / norm
    lam = float(v @ cov @ v)
    for _ in range(max_iter):
        w = _deflate(cov @ v, found)
        norm = np.linalg.norm(w)
        if norm < 1e-300:
            return None
        v = w / norm
        new = float(v @ cov @ v)
        if abs(new - lam) <= tol * abs(new):
            # one more Gram-Schmidt pass so the basis is orthonormal to rounding
            v = _deflate(v, found)
            return v / np.linalg.norm(v)
        lam = new
    return None


def principal_directions(x: np.ndarray, k: int = 2, seed: int = 0, tol: float = 1e-9, max_iter: int = 1000, retries: int = 5):
    """Top-``k`` covariance eigenpairs by power iteration with deflation.

    Deflation projects every iterate off the directions already found.
    Each search starts from the first canonical basis vector and restarts
    from seeded random vectors when it stalls or fails to converge.
    Returns ``(eigenvalues, directions[k, d])`` sorted by eigenvalue.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[1]
    cov = np.cov(x, rowvar=False, bias=False).reshape(d, d)
    scale = np.trace(cov)
    rng = np.random.default_rng(seed)
    vals, vecs = [], []
    for _ in range(k):
        left = scale - sum(float(u @ cov @ u) for u in vecs)
        if scale == 0 or left <= 1e-14 * scale:
            # remaining variance is nil: any orthogonal direction will do
            vals.append(0.0)
            vecs.append(_orthogonal_unit(vecs, d, rng))
            continue
        start = np.zeros(d)
        start[0] = 1.0
        v = None
        for attempt in range(retries + 1):
            v = _power_iteration(cov, start, vecs, tol, max_iter)
            if v is not None:
                break
            start = rng.standard_normal(d)
        if v is None:
            raise NumericalError(f"power iteration did not converge after {retries} restarts")
        vals.append(float(v @ cov @ v))
        vecs.append(v)
    order = np.argsort(vals, kind="stable")[::-1]
    return np.asarray(vals)[order], np.asarray(vecs)[order]


def _orthogonal_unit(vecs, d, rng):
    v = rng.standard_normal(d)
    for u in vecs:
        v = v - (v @ u) * u
    return v / np.linalg.norm(v)


def project_latent(groups: dict[str, np.ndarray], seed: int = 0) -> tuple[np.ndarray, list[str]]:
    """Centre all rows and project them onto the top-2 principal directions."""
    labels = [g for g, rows in groups.items() for _ in range(len(rows))]
    if len(labels) < 3:
        raise UsageError("projection needs at least 3 rows")
    x = np.concatenate([np.asarray(r, dtype=np.float64) for r in groups.values()])
    x = x - x.mean(axis=0)
    _, vecs = principal_directions(x, 2, seed=seed)
    return x @ vecs.T, labels


# -- serialisation ------------------------------------------------------------------


def rows_to_csv(rows: list[dict], columns) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(v) for k, v in row.items()})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def scatter_svg(points: np.ndarray, labels: list[str], size: int = 480) -> str:
    """Static 4-colour scatter plot with a fixed legend."""
    pad = 40
    lo, hi = points.min(axis=0), points.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    xy = (points - lo) / span * (size - 2 * pad) + pad
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 160}" height="{size}" viewBox="0 0 {size + 160} {size}">',
        f'<rect width="{size + 160}" height="{size}" fill="white"/>',
    ]
    for (px, py), lab in zip(xy, labels):
        out.append(f'<circle cx="{px:.2f}" cy="{size - py:.2f}" r="2.5" fill="{GROUP_COLORS[lab]}" fill-opacity="0.7"/>')
    for i, g in enumerate(PROJECTION_GROUPS):
        y = 30 + 22 * i
        out.append(f'<circle cx="{size + 15}" cy="{y}" r="5" fill="{GROUP_COLORS[g]}"/>')
        out.append(f'<text x="{size + 26}" y="{y + 4}" font-family="sans-serif" font-size="12">{g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def is_nondecreasing(values) -> bool:
    values = list(values)
    return all(a <= b for a, b in zip(values, values[1:]))


def finite_or_none(x: float):
    return x if math.isfinite(x) else None
