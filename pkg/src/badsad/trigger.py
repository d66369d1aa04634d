"""Trigger masks and clean-label poisoning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ConfigurationError, DimensionError

KINDS = ("corner4", "sub_lower_right", "distinct_center")


@dataclass(frozen=True)
class TriggerMask:
    mask: np.ndarray
    mu: float = 1.0
    kind: str = "corner4"
    square_size: int = 3

    @property
    def popcount(self) -> int:
        return int(self.mask.sum())

    def with_kind(self, kind: str) -> "TriggerMask":
        return build_mask(kind, self.square_size, *self.mask.shape, mu=self.mu)


@dataclass(frozen=True)
class PoisonSpec:
    kind: str = "corner4"
    square_size: int = 3
    mu: float = 1.0
    count: int = 500
    seed: int = 0


def default_square_size(shape: tuple[int, ...]) -> int:
    """3 px for 28x28 inputs, 4 px for 32x32, one slot for vector data."""
    if len(shape) == 1:
        return 1
    return 4 if shape[-1] >= 32 else 3


def _corner_blocks(s: int, h: int, w: int) -> list[tuple[slice, slice]]:
    return [
        (slice(0, s), slice(0, s)),
        (slice(0, s), slice(w - s, w)),
        (slice(h - s, h), slice(0, s)),
        (slice(h - s, h), slice(w - s, w)),  # lower right
    ]


def build_mask(kind: str, square_size: int, *shape: int, mu: float = 1.0) -> TriggerMask:
    """Binary trigger mask for a sample of ``shape``.

    Image shapes are ``(C, H, W)``; every channel is marked, so the trigger
    is a white square in colour images too.  For vector samples ``(D,)``
    ``corner4`` covers the last ``square_size`` coordinates,
    ``sub_lower_right`` only the final coordinate, and ``distinct_center``
    the ``square_size`` coordinates just before the full trigger.
    """
    if kind not in KINDS:
        raise ConfigurationError(f"unknown trigger kind {kind!r}; expected one of {KINDS}")
    if square_size < 1:
        raise ConfigurationError(f"square_size must be >= 1, got {square_size}")
    if not 0.0 <= mu <= 1.0:
        raise ConfigurationError(f"mu must lie in [0, 1], got {mu}")
    s = square_size

    if len(shape) == 1:
        (d,) = shape
        if 2 * s > d:
            raise ConfigurationError(f"vector of length {d} cannot hold two trigger runs of {s} slots")
        mask = np.zeros(d, np.float32)
        if kind == "corner4":
            mask[d - s :] = 1
        elif kind == "sub_lower_right":
            mask[d - 1] = 1
        else:
            mask[d - 2 * s : d - s] = 1
        return TriggerMask(mask, float(mu), kind, s)

    if len(shape) != 3:
        raise DimensionError(f"trigger masks need a (C, H, W) or (D,) shape, got {shape}")
    c, h, w = shape
    if 2 * s > min(h, w):
        raise ConfigurationError(f"square_size {s} too large for a {h}x{w} image (need 2*size <= {min(h, w)})")
    mask = np.zeros((c, h, w), np.float32)
    corners = _corner_blocks(s, h, w)
    if kind == "corner4":
        for rows, cols in corners:
            mask[:, rows, cols] = 1
    elif kind == "sub_lower_right":
        rows, cols = corners[-1]
        mask[:, rows, cols] = 1
    else:
        top, left = (h - s) // 2, (w - s) // 2
        mask[:, top : top + s, left : left + s] = 1
        full = build_mask("corner4", s, c, h, w).mask
        if np.any(mask * full):
            raise ConfigurationError(f"centred {s}px block overlaps the corner trigger on a {h}x{w} image")
    return TriggerMask(mask, float(mu), kind, s)


def apply_trigger(images: np.ndarray, trigger: TriggerMask) -> np.ndarray:
    """X * (1 - T) + T * mu for one sample or a batch with a leading axis."""
    images = np.asarray(images)
    tail = images.shape[-trigger.mask.ndim :] if images.ndim >= trigger.mask.ndim else images.shape
    if tail != trigger.mask.shape:
        raise DimensionError(f"image shape {images.shape} does not end in mask shape {trigger.mask.shape}")
    # exact for a binary mask: on-mask pixels become mu, off-mask ones are untouched
    mu = images.dtype.type(trigger.mu) if images.dtype.kind == "f" else trigger.mu
    return np.where(trigger.mask.astype(bool), mu, images)


def select_poison_indices(n_source: int, count: int, seed: int) -> np.ndarray:
    if count > n_source:
        raise CapacityError(f"poison count {count} exceeds the {n_source} available source images")
    if count < 0:
        raise ConfigurationError(f"poison count must be >= 0, got {count}")
    if count == n_source:
        return np.arange(n_source)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n_source, size=count, replace=False))


def poison_set(source: np.ndarray, spec: PoisonSpec, trigger: TriggerMask | None = None):
    """Triggered copies of ``count`` source images chosen under ``spec.seed``.

    Returns ``(poisoned, source_indices)``; the source array is not modified.
    Callers pass normal images only (clean-label setting).
    """
    if trigger is None:
        trigger = build_mask(spec.kind, spec.square_size, *source.shape[1:], mu=spec.mu)
    idx = select_poison_indices(len(source), spec.count, spec.seed)
    if len(idx) == 0:
        return np.zeros((0,) + source.shape[1:], source.dtype), idx
    return apply_trigger(source[idx], trigger), idx
