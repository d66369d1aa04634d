"""End-to-end hypersphere training in the clean, poison-only, BadSAD and dirty-label modes."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .datasets import DatasetSplit
from .errors import ConfigurationError, TrainingError
from .losses import BatchEmbeddings, LossWeights, alignment_loss, concentration_loss, deepsad_loss, group_cosines
from .model import DEFAULT_ZERO_GUARD, Centers, ModelState, compute_center, forward_encoder
from .trigger import PoisonSpec, apply_trigger, build_mask, select_poison_indices

MODES = ("clean", "poison_only", "badsad", "dirty_label")
GROUPS = ("unlabeled", "labeled_normal", "labeled_abnormal", "poisoned")
_GROUP_IDS = {g: i for i, g in enumerate(GROUPS)}
# training label each group enters the objective with (0 = unlabeled); D_p is routed as normal
GROUP_LABELS = {"unlabeled": 0, "labeled_normal": 1, "labeled_abnormal": -1, "poisoned": 1}
LOG_COLUMNS = ("epoch", "L", "L_DA", "L_DC", "L_total", "cos_np", "cos_na")


@dataclass(frozen=True)
class BatchSizes:
    unlabeled: int = 64
    labeled_normal: int = 16
    labeled_abnormal: int = 16
    poisoned: int = 16

    def quota(self, group: str) -> int:
        return getattr(self, group)


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "badsad"
    epochs: int = 50
    lr: float = 1e-3
    batch: BatchSizes = BatchSizes()
    weights: LossWeights = LossWeights()
    poison: PoisonSpec = PoisonSpec()
    seed: int = 0
    dtype: str = "float32"
    zero_guard: float = DEFAULT_ZERO_GUARD

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown training mode {self.mode!r}; expected one of {MODES}")
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        for g in self.groups:
            if self.batch.quota(g) < 1:
                raise ConfigurationError(f"batch size for {g} must be >= 1 in mode {self.mode}")

    @property
    def groups(self) -> tuple[str, ...]:
        return GROUPS[:3] if self.mode == "clean" else GROUPS

    def snapshot(self) -> dict:
        return asdict(self)


@dataclass
class TrainRun:
    state: ModelState
    centers: Centers
    history: list[dict]
    step_losses: list[float]
    config: dict
    audit: dict = field(default_factory=dict)


def schedule_batches(group_sizes: dict[str, int], quotas: dict[str, int], seed: int, epoch: int) -> list[dict[str, np.ndarray]]:
    """Index batches for one epoch.

    The epoch has ceil(|unlabeled| / quota) steps; every group is cycled
    independently through fresh permutations (seeded by group and epoch)
    so each step draws exactly its quota.
    """
    steps = max(1, math.ceil(group_sizes["unlabeled"] / quotas["unlabeled"]))
    streams = {}
    for group, size in group_sizes.items():
        if size == 0:
            raise ConfigurationError(f"group {group!r} is empty")
        need = quotas[group] * steps
        parts, cycle = [], 0
        while sum(len(p) for p in parts) < need:
            rng = np.random.default_rng([seed, _GROUP_IDS[group], epoch, cycle])
            parts.append(rng.permutation(size))
            cycle += 1
        streams[group] = np.concatenate(parts)[:need]
    return [
        {g: streams[g][k * quotas[g] : (k + 1) * quotas[g]] for g in group_sizes}
        for k in range(steps)
    ]


def dirty_label_set(split: DatasetSplit, spec: PoisonSpec) -> np.ndarray:
    """Triggered copies of labeled-abnormal images, to be trained as normal."""
    mask = build_mask(spec.kind, spec.square_size, *split.sample_shape, mu=spec.mu)
    idx = select_poison_indices(len(split.labeled_abnormal), spec.count, spec.seed)
    return apply_trigger(split.labeled_abnormal[idx], mask)


def _group_data(config: TrainConfig, split: DatasetSplit) -> dict[str, np.ndarray]:
    data = {g: split.role(g) for g in GROUPS[:3]}
    if config.mode in ("poison_only", "badsad"):
        if split.poisoned is None or len(split.poisoned) == 0:
            raise ConfigurationError(f"mode {config.mode} needs a populated poisoned set D_p")
        data["poisoned"] = split.poisoned
    elif config.mode == "dirty_label":
        data["poisoned"] = dirty_label_set(split, config.poison)
    for g, arr in data.items():
        if len(arr) == 0:
            raise ConfigurationError(f"mode {config.mode} needs a nonempty {g} set")
    return data


def train(config: TrainConfig, split: DatasetSplit, pretrained: ModelState) -> TrainRun:
    dtype = np.dtype(config.dtype)
    if tuple(split.sample_shape) != tuple(pretrained.arch.input_shape):
        raise ConfigurationError(
            f"pretrained {pretrained.arch.tag} expects {pretrained.arch.input_shape}, split holds {split.sample_shape}"
        )
    data = _group_data(config, split)
    data = {g: np.asarray(a, dtype=dtype) for g, a in data.items()}

    state = pretrained.copy(dtype)
    state.params = {n: p for n, p in state.params.items() if n.startswith("enc.")}
    state.history = []

    triggered_encoded = 0
    triggered_negative = 0
    triggered_groups = {"poisoned"} & set(data)
    guard = config.zero_guard
    c = compute_center(state, data["labeled_normal"], guard)
    if "poisoned" in data:
        c_p = compute_center(state, data["poisoned"], guard)
        triggered_encoded += len(data["poisoned"])
    else:
        c_p = c.copy()
    c_a = compute_center(state, data["labeled_abnormal"], guard)
    centers = Centers(c, c_p, c_a, guard)
    frozen = centers.tobytes()

    w = config.weights
    opt = dc.AdamState(lr=config.lr, weight_decay=w.lambda_wd)
    params = state.encoder_params()
    groups = config.groups
    quotas = {g: config.batch.quota(g) for g in groups}
    sizes = {g: len(data[g]) for g in groups}
    history, step_losses = [], []
    step = 0

    for epoch in range(config.epochs):
        sums = {k: 0.0 for k in LOG_COLUMNS[1:]}
        counts = {k: 0 for k in LOG_COLUMNS[1:]}
        for batch in schedule_batches(sizes, quotas, config.seed, epoch):
            x = np.concatenate([data[g][batch[g]] for g in groups])
            for g in triggered_groups:
                triggered_encoded += len(batch[g])
                if GROUP_LABELS[g] < 0:
                    triggered_negative += len(batch[g])
            with dc.Tape():
                z = forward_encoder(state, x)
                rows, offset = {}, 0
                for g in groups:
                    k = len(batch[g])
                    rows[g] = z[offset : offset + k]
                    offset += k
                emb = BatchEmbeddings(rows["unlabeled"], rows["labeled_normal"], rows["labeled_abnormal"], rows.get("poisoned"))
                route = "none" if config.mode == "clean" else "labeled_normal"
                base = deepsad_loss(emb, centers.c, w, treat_poison_as=route)
                parts = {"L": base}
                if emb.z_p is not None:
                    parts["L_DA"] = alignment_loss(emb.z_ln, emb.z_p, emb.z_la, w.margin, w.pairing)
                    parts["L_DC"] = concentration_loss(emb.z_p, centers.c_p, emb.z_la, centers.c_a)
                    cos_na, cos_np = group_cosines(emb.z_ln, emb.z_p, emb.z_la)
                    parts["cos_np"], parts["cos_na"] = cos_np, cos_na
                if config.mode == "badsad":
                    loss = base + parts["L_DA"] * w.alpha + parts["L_DC"] * w.beta
                else:
                    loss = base
                parts["L_total"] = loss
                value = float(loss.data)
                if not np.isfinite(value):
                    raise TrainingError(f"loss became non-finite at step {step} (epoch {epoch})")
                dc.backward(loss)
            dc.adam_step(params, opt)
            step_losses.append(value)
            for k, t in parts.items():
                sums[k] += float(t.data)
                counts[k] += 1
            step += 1
        row = {"epoch": epoch}
        row.update({k: (sums[k] / counts[k] if counts[k] else float("nan")) for k in LOG_COLUMNS[1:]})
        history.append(row)

    if centers.tobytes() != frozen:
        raise TrainingError("centers changed during training")
    audit = {
        "mode": config.mode,
        "triggered_images_encoded": triggered_encoded,
        "triggered_training_images": len(data.get("poisoned", ())),
        "triggered_label": None if config.mode == "clean" else "+1",
        "triggered_source_role": {
            "clean": None,
            "poison_only": "labeled_normal",
            "badsad": "labeled_normal",
            "dirty_label": "labeled_abnormal",
        }[config.mode],
        "triggered_negative_label_count": triggered_negative,
    }
    return TrainRun(state, centers, history, step_losses, config.snapshot(), audit)
