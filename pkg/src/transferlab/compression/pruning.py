"""Fine-grained magnitude pruning: one-shot thresholding and dynamic network surgery."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..data import LabeledDataset
from ..model import Checkpoint
from ..trainer import TrainConfig, train

__all__ = [
    "PruneConfig",
    "PruneError",
    "density",
    "keep_count",
    "threshold_mask",
    "dns_update",
    "dns_alpha",
    "prune_one_shot",
    "prune_dns",
    "prune",
]

logger = logging.getLogger(__name__)


class PruneError(ValueError):
    pass


@dataclass(frozen=True)
class PruneConfig:
    target_density: float
    mode: str = "dns"  # one_shot | dns
    dns_margin: float = 0.1
    reeval_period: int | None = 30  # optimisation steps between DNS mask updates; None = once per epoch
    fine_tune: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=3, decay_points=(1, 2)))

    def __post_init__(self):
        if not 0 < self.target_density <= 1:
            raise ValueError(f"target_density must lie in (0, 1], got {self.target_density}")
        if self.mode not in ("one_shot", "dns"):
            raise ValueError(f"unknown pruning mode {self.mode!r}")
        if self.dns_margin < 0:
            raise ValueError(f"dns_margin must be >= 0, got {self.dns_margin}")
        if self.reeval_period is not None and self.reeval_period < 1:
            raise ValueError(f"reeval_period must be >= 1, got {self.reeval_period}")


def density(checkpoint: Checkpoint) -> float:
    """Nonzero effective weights over all weight elements; biases are not counted."""
    eff = checkpoint.effective_params()
    names = checkpoint.architecture.weight_names()
    nonzero = sum(int(np.count_nonzero(eff[n])) for n in names)
    total = sum(eff[n].size for n in names)
    return nonzero / total


def keep_count(size: int, target_density: float, layer: str = "") -> int:
    keep = int(round(target_density * size))
    if keep < 1:
        raise PruneError(f"target density {target_density} leaves no surviving weights in layer {layer or '?'} ({size} weights)")
    return keep


def _rank(magnitude: np.ndarray) -> np.ndarray:
    """Flat indices by descending magnitude; equal magnitudes keep scan order."""
    return np.argsort(-magnitude.ravel(), kind="stable")


def threshold_mask(weight: np.ndarray, target_density: float, layer: str = "") -> tuple[np.ndarray, float]:
    """Mask keeping the ``target_density`` fraction of largest-|w| entries, and the threshold used.

    The threshold is the smallest surviving magnitude; entries below it are
    masked.  Ties at the threshold are settled by scan order so the count is exact.
    """
    mag = np.abs(weight)
    keep = keep_count(mag.size, target_density, layer)
    order = _rank(mag)
    mask = np.zeros(mag.size, dtype=np.float32)
    mask[order[:keep]] = 1
    alpha = float(mag.ravel()[order[keep - 1]])
    return mask.reshape(weight.shape), alpha


def dns_update(weight: np.ndarray, mask: np.ndarray, alpha: float, beta: float) -> np.ndarray:
    """Two-threshold mask rule: prune below ``alpha``, revive above ``beta``, hold in between."""
    if beta < alpha:
        raise ValueError(f"need alpha <= beta, got {alpha} > {beta}")
    mag = np.abs(weight).astype(np.float64)  # compare at full threshold precision
    out = mask.copy()
    out[mag < alpha] = 0
    out[mag > beta] = 1
    return out


def dns_alpha(weight: np.ndarray, mask: np.ndarray, keep: int, margin: float) -> float:
    """Largest alpha whose two-threshold update (beta = alpha * (1 + margin)) keeps at least ``keep`` weights.

    The survivor count falls monotonically as alpha grows, so bisection finds
    the threshold at which the updated mask sits at the target density.
    """
    flat = np.abs(weight).astype(np.float64).ravel()
    mag = np.sort(flat)
    held = np.sort(flat[mask.ravel() > 0])

    def survivors(alpha: float) -> int:
        beta = alpha * (1 + margin)
        above = mag.size - np.searchsorted(mag, beta, side="right")
        band = np.searchsorted(held, beta, side="right") - np.searchsorted(held, alpha, side="left")
        return int(above + band)

    lo, hi = 0.0, float(mag[-1]) if mag.size else 0.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if survivors(mid) >= keep:
            lo = mid
        else:
            hi = mid
    return lo


def _settle(weight: np.ndarray, mask: np.ndarray, keep: int) -> np.ndarray:
    """Adjust ``mask`` to exactly ``keep`` survivors by dropping weakest / reviving strongest."""
    flat_m = mask.ravel().copy()
    mag = np.abs(weight).ravel()
    alive = int(flat_m.sum())
    if alive > keep:
        alive_idx = np.flatnonzero(flat_m)
        weakest = alive_idx[np.argsort(mag[alive_idx], kind="stable")][: alive - keep]
        flat_m[weakest] = 0
    elif alive < keep:
        dead_idx = np.flatnonzero(flat_m == 0)
        strongest = dead_idx[np.argsort(-mag[dead_idx], kind="stable")][: keep - alive]
        flat_m[strongest] = 1
    return flat_m.reshape(mask.shape)


def _masked_start(checkpoint: Checkpoint) -> dict[str, np.ndarray]:
    return {
        n: checkpoint.params[n] * checkpoint.masks[n] if n in checkpoint.masks else checkpoint.params[n]
        for n in checkpoint.architecture.weight_names()
    }


def _finish(ckpt: Checkpoint, config: PruneConfig) -> Checkpoint:
    for name, m in ckpt.masks.items():
        ckpt.params[name] = ckpt.params[name] * m
    ckpt.metadata.update(
        prune_mode=config.mode,
        target_density=repr(config.target_density),
        dns_margin=repr(config.dns_margin),
    )
    return ckpt


def prune_one_shot(
    checkpoint: Checkpoint,
    config: PruneConfig,
    dataset: LabeledDataset | None = None,
    eval_dataset: LabeledDataset | None = None,
) -> Checkpoint:
    """Threshold every weight tensor to the target density, then fine-tune with masks frozen.

    Fine-tuning needs ``dataset``; it is skipped when the masks are all ones.
    """
    weights = _masked_start(checkpoint)
    masks = {}
    for name, w in weights.items():
        masks[name], alpha = threshold_mask(w, config.target_density, name)
        logger.debug("%s: alpha=%.6g", name, alpha)
    ckpt = checkpoint.replace(masks=masks)
    lossless = all(m.all() for m in masks.values())
    if dataset is not None and config.fine_tune.epochs and not lossless:
        ckpt = train(ckpt, dataset, config.fine_tune, eval_dataset).checkpoint
    return _finish(ckpt, config)


def prune_dns(
    checkpoint: Checkpoint,
    config: PruneConfig,
    dataset: LabeledDataset | None = None,
    eval_dataset: LabeledDataset | None = None,
) -> Checkpoint:
    """Dynamic network surgery.

    Training runs with straight-through gradients on every weight, masked or
    not.  Every ``reeval_period`` steps each layer's mask is re-evaluated with
    the two-threshold rule, beta = alpha * (1 + margin) and alpha chosen so
    the updated mask keeps the target density; weights in the band keep
    their previous mask bit.  With more than
    one fine-tune epoch the survivor count is settled to the exact target at
    the start of the last epoch, which then trains that final mask; otherwise
    it is settled at the end.
    """
    weights = _masked_start(checkpoint)
    masks = {n: threshold_mask(w, config.target_density, n)[0] for n, w in weights.items()}
    ckpt = checkpoint.replace(masks=masks)
    lossless = all(m.all() for m in masks.values())
    if dataset is None or not config.fine_tune.epochs or lossless:
        return _finish(ckpt, config)

    epochs = config.fine_tune.epochs
    steps_per_epoch = -(-len(dataset) // config.fine_tune.batch_size)
    period = config.reeval_period or steps_per_epoch
    freeze_at = (epochs - 1) * steps_per_epoch if epochs > 1 else None
    keep = {n: keep_count(w.size, config.target_density, n) for n, w in weights.items()}

    def reevaluate(params, live_masks, step):
        if freeze_at is not None and step > freeze_at:
            return
        if step % period == 0:
            for name, k in keep.items():
                alpha = dns_alpha(params[name], live_masks[name], k, config.dns_margin)
                live_masks[name][...] = dns_update(params[name], live_masks[name], alpha, alpha * (1 + config.dns_margin))
        if step == freeze_at:
            for name, k in keep.items():
                live_masks[name][...] = _settle(params[name], live_masks[name], k)

    ckpt = train(ckpt, dataset, config.fine_tune, eval_dataset, masked_updates=True, step_hook=reevaluate).checkpoint
    for name, k in keep.items():
        ckpt.masks[name] = _settle(ckpt.params[name], ckpt.masks[name], k)
    return _finish(ckpt, config)


def prune(checkpoint: Checkpoint, config: PruneConfig, dataset=None, eval_dataset=None) -> Checkpoint:
    fn = prune_dns if config.mode == "dns" else prune_one_shot
    return fn(checkpoint, config, dataset, eval_dataset)
