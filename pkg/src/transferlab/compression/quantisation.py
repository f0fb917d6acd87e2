"""Fixed-point quantisation of a whole checkpoint (weights, biases and activations)."""

from __future__ import annotations

from ..data import LabeledDataset
from ..model import Checkpoint
from ..trainer import TrainConfig, train
from ..fixedpoint import FixedPointFormat, on_grid, quantise_array

__all__ = ["quantise_model", "FLOAT32_SIGNIFICAND_BITS"]

FLOAT32_SIGNIFICAND_BITS = 24


def _already_quantised(ckpt: Checkpoint, fmt_w: FixedPointFormat, fmt_a: FixedPointFormat | None) -> bool:
    if ckpt.activation_format != fmt_a:
        return False
    return all(ckpt.weight_formats.get(n) == fmt_w and on_grid(v, fmt_w).all() for n, v in ckpt.params.items())


def quantise_model(
    checkpoint: Checkpoint,
    fmt_weights: FixedPointFormat,
    fmt_activations: FixedPointFormat | None,
    fine_tune: TrainConfig | None = None,
    dataset: LabeledDataset | None = None,
    eval_dataset: LabeledDataset | None = None,
) -> Checkpoint:
    """Put every parameter on ``fmt_weights``'s grid and quantise activations with ``fmt_activations``.

    With a dataset and a non-empty ``fine_tune`` config the model is first
    fine-tuned with the straight-through estimator.  Fine-tuning is skipped
    when there is nothing to recover: the checkpoint already carries these
    formats, or the fraction is at least as fine as float32's significand.
    """
    ckpt = checkpoint.replace(
        weight_formats={n: fmt_weights for n in checkpoint.params},
        activation_format=fmt_activations,
    )
    lossless = _already_quantised(checkpoint, fmt_weights, fmt_activations) or (
        fmt_weights.fraction_bits >= FLOAT32_SIGNIFICAND_BITS
        and (fmt_activations is None or fmt_activations.fraction_bits >= FLOAT32_SIGNIFICAND_BITS)
    )
    if dataset is not None and fine_tune is not None and fine_tune.epochs and not lossless:
        ckpt = train(ckpt, dataset, fine_tune, eval_dataset).checkpoint
    for name, value in ckpt.params.items():
        if name in ckpt.masks:
            value = value * ckpt.masks[name]
        ckpt.params[name] = quantise_array(value, fmt_weights)
    ckpt.metadata.update(
        weight_format=f"{fmt_weights.bitwidth},{fmt_weights.integer_bits}",
        activation_format="" if fmt_activations is None else f"{fmt_activations.bitwidth},{fmt_activations.integer_bits}",
    )
    return ckpt
