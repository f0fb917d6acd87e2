"""White-box untargeted attacks: FGM, FGSM, their iterative forms and L2 DeepFool.

Gradients are always taken from the checkpoint passed in.  Quantised
checkpoints are differentiated through their straight-through view: the
forward pass is quantised, the quantisers are identity in the backward pass.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import read_idx, write_idx
from .model import Checkpoint, build_graph

__all__ = [
    "METHODS",
    "TABLE1",
    "AttackConfig",
    "AdversarialBatch",
    "AuditLog",
    "input_gradient",
    "fgm",
    "fgsm",
    "ifgsm",
    "ifgm",
    "deepfool_l2",
    "generate",
    "save_batch",
    "load_batch",
]

logger = logging.getLogger(__name__)

METHODS = ("fgm", "fgsm", "ifgsm", "ifgm", "deepfool")

# (epsilon, iterations) per network and method.  For DeepFool epsilon is the
# overshoot and iterations the iteration cap.
TABLE1 = {
    "lenet5": {"ifgsm": (0.02, 12), "ifgm": (10.0, 5), "deepfool": (0.01, 5)},
    "cifarnet": {"ifgsm": (0.02, 12), "ifgm": (0.02, 12), "deepfool": (0.01, 3)},
}

Box = tuple[float, float] | None
DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    method: str
    epsilon: float
    iterations: int = 1
    box: Box = (0.0, 1.0)
    clip_reference: str = "previous"  # previous | original

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown attack {self.method!r}; choose from {', '.join(METHODS)}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.clip_reference not in ("previous", "original"):
            raise ValueError(f"clip_reference must be 'previous' or 'original', got {self.clip_reference!r}")

    @classmethod
    def table1(cls, method: str, network: str = "lenet5", **overrides) -> AttackConfig:
        eps, iters = TABLE1[network][method]
        return cls(method, eps, iters, **overrides)

    @property
    def label(self) -> str:
        return f"{self.method}(eps={self.epsilon:g},i={self.iterations})"


class AuditLog:
    """Append-only record of which checkpoint each gradient / evaluation touched."""

    def __init__(self):
        self.events: list[tuple[str, str]] = []

    def record(self, kind: str, checkpoint_id: str) -> None:
        self.events.append((kind, checkpoint_id))

    def touched(self, kind: str | None = None) -> set[str]:
        return {cid for k, cid in self.events if kind is None or k == kind}


@dataclass
class AdversarialBatch:
    original: np.ndarray
    adversarial: np.ndarray
    labels: np.ndarray
    flagged: np.ndarray
    iterations: np.ndarray
    source: str
    config: AttackConfig
    l2: np.ndarray = field(init=False)
    linf: np.ndarray = field(init=False)

    def __post_init__(self):
        delta = (self.adversarial.astype(np.float64) - self.original).reshape(len(self.original), -1)
        self.l2 = np.sqrt((delta**2).sum(axis=1))
        self.linf = np.abs(delta).max(axis=1) if delta.size else np.zeros(len(delta))

    def __len__(self) -> int:
        return len(self.labels)


def _clip_box(x: np.ndarray, box: Box) -> np.ndarray:
    return x if box is None else np.clip(x, box[0], box[1])


def input_gradient(
    checkpoint: Checkpoint,
    images: np.ndarray,
    labels: np.ndarray,
    audit: AuditLog | None = None,
    source: str | None = None,
    chunk: int = 500,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample gradient of the cross-entropy w.r.t. each input, plus a finite-row mask."""
    if audit is not None:
        audit.record("gradient", source or checkpoint.fingerprint())
    grads = np.empty(images.shape, dtype=np.float32)
    for s in range(0, len(images), chunk):
        g = build_graph(checkpoint, images[s : s + chunk], input_grad=True)
        loss = ad.softmax_cross_entropy(g.logits, labels[s : s + chunk], reduction="sum")
        grads[s : s + chunk] = ad.backward(loss, [g.inputs])[g.inputs].data
    finite = np.isfinite(grads.reshape(len(grads), -1)).all(axis=1)
    if not finite.all():
        logger.warning("non-finite input gradient for %d sample(s); passing them through", int((~finite).sum()))
    return grads, finite


def _prepare(images, labels) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(images, dtype=np.float32)
    y = np.asarray(labels, dtype=np.int64)
    if len(x) != len(y):
        raise ValueError(f"{len(x)} images but {len(y)} labels")
    return x, y


def _single_step(checkpoint, images, labels, config: AttackConfig, signed: bool, audit) -> AdversarialBatch:
    x, y = _prepare(images, labels)
    source = checkpoint.fingerprint()
    g, ok = input_gradient(checkpoint, x, y, audit, source)
    step = np.sign(g) if signed else g
    eta = np.float32(config.epsilon) * step
    eta[~ok] = 0
    adv = _clip_box(x + eta, config.box).astype(np.float32)
    return AdversarialBatch(x, adv, y, ~ok, np.ones(len(y), dtype=np.int64), source, config)


def _iterative(checkpoint, images, labels, config: AttackConfig, signed: bool, audit) -> AdversarialBatch:
    x, y = _prepare(images, labels)
    source = checkpoint.fingerprint()
    eps = np.float32(config.epsilon)
    adv = x.copy()
    flagged = np.zeros(len(y), dtype=bool)
    for _ in range(config.iterations):
        g, ok = input_gradient(checkpoint, adv, y, audit, source)
        flagged |= ~ok
        step = eps * (np.sign(g) if signed else g)
        step[flagged] = 0
        centre = adv if config.clip_reference == "previous" else x
        nxt = np.clip(adv + step, centre - eps, centre + eps)
        adv = _clip_box(nxt, config.box).astype(np.float32)
    adv[flagged] = x[flagged]
    iters = np.full(len(y), config.iterations, dtype=np.int64)
    return AdversarialBatch(x, adv, y, flagged, iters, source, config)


def fgm(checkpoint, images, labels, epsilon: float, box: Box = (0.0, 1.0), audit=None) -> AdversarialBatch:
    """One step along the raw loss gradient, then clamp into the pixel box."""
    return _single_step(checkpoint, images, labels, AttackConfig("fgm", epsilon, 1, box), False, audit)


def fgsm(checkpoint, images, labels, epsilon: float, box: Box = (0.0, 1.0), audit=None) -> AdversarialBatch:
    """One step of size epsilon along the sign of the loss gradient (sign(0) = 0)."""
    return _single_step(checkpoint, images, labels, AttackConfig("fgsm", epsilon, 1, box), True, audit)


def ifgsm(
    checkpoint, images, labels, epsilon: float, iterations: int, box: Box = (0.0, 1.0),
    clip_reference: str = "previous", audit=None,
) -> AdversarialBatch:
    """Iterated FGSM.

    Each iterate is clamped to within epsilon of the clip reference (by
    default the previous iterate, so total drift may reach
    ``iterations * epsilon``) and to the pixel box.  Gradients are
    re-evaluated at every iterate.
    """
    cfg = AttackConfig("ifgsm", epsilon, iterations, box, clip_reference)
    return _iterative(checkpoint, images, labels, cfg, True, audit)


def ifgm(
    checkpoint, images, labels, epsilon: float, iterations: int, box: Box = (0.0, 1.0),
    clip_reference: str = "previous", audit=None,
) -> AdversarialBatch:
    """Iterated FGM: like :func:`ifgsm` but each step is ``epsilon * gradient``."""
    cfg = AttackConfig("ifgm", epsilon, iterations, box, clip_reference)
    return _iterative(checkpoint, images, labels, cfg, False, audit)


def _jacobian(checkpoint: Checkpoint, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Logits (N x C) and their input gradients (C x N x ...)."""
    g = build_graph(checkpoint, x, input_grad=True)
    logits = g.logits.data
    n_classes = logits.shape[1]
    jac = np.empty((n_classes,) + x.shape, dtype=np.float32)
    for k in range(n_classes):
        seed = np.zeros_like(logits)
        seed[:, k] = 1
        jac[k] = ad.backward(ad.dot_const(g.logits, seed), [g.inputs])[g.inputs].data
    return logits, jac


def deepfool_l2(
    checkpoint, images, labels, overshoot: float, max_iters: int, box: Box = (0.0, 1.0), audit=None,
    chunk: int = 250,
) -> AdversarialBatch:
    """L2 DeepFool.

    While a sample is still classified as its label (and under the iteration
    cap) the logits are linearised at the current iterate and the sample takes
    the minimal step onto the nearest linearised boundary.  With a box, pixels
    pinned at a face are left out of the boundary normals when the step would
    push them outward, so the step stays inside the valid image range.  Steps
    accumulate; the iterate and the final image are
    ``clip(x + (1 + overshoot) * total)``.
    A sample whose chosen boundary normal vanishes is flagged and stops.
    Samples misclassified from the start are left untouched.
    """
    cfg = AttackConfig("deepfool", overshoot, max_iters, box)
    x, y = _prepare(images, labels)
    source = checkpoint.fingerprint()
    adv = np.empty_like(x)
    flagged = np.zeros(len(y), dtype=bool)
    iters = np.zeros(len(y), dtype=np.int64)
    for s in range(0, len(y), chunk):
        part = slice(s, s + chunk)
        adv[part], flagged[part], iters[part] = _deepfool_chunk(
            checkpoint, x[part], y[part], overshoot, max_iters, box, audit, source
        )
    return AdversarialBatch(x, adv, y, flagged, iters, source, cfg)


def _deepfool_chunk(checkpoint, x, y, overshoot, max_iters, box, audit, source):
    n = len(y)
    scale = np.float32(1 + overshoot)
    total = np.zeros(x.shape, dtype=np.float64)
    iters = np.zeros(n, dtype=np.int64)
    flagged = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    rows = np.arange(n)
    for _ in range(max_iters):
        idx = rows[active]
        if not len(idx):
            break
        if audit is not None:
            audit.record("gradient", source)
        xa = _clip_box(x[idx] + (scale * total[idx]).astype(np.float32), box).astype(np.float32)
        logits, jac = _jacobian(checkpoint, xa)
        yl = y[idx]
        still = logits.argmax(axis=1) == yl
        active[idx[~still]] = False
        sel = np.flatnonzero(still)
        if not len(sel):
            break
        local = np.arange(len(idx))[sel]
        own_grad = jac[yl[sel], local].reshape(len(sel), -1).astype(np.float64)
        own_logit = logits[local, yl[sel]].astype(np.float64)
        w = jac[:, local].reshape(jac.shape[0], len(sel), -1).astype(np.float64) - own_grad[None]
        if box is not None:
            # pixels pinned at a box face cannot move outward; leave them out of the normal
            flat = xa[local].reshape(len(sel), -1)[None]
            w[((flat <= box[0]) & (w < 0)) | ((flat >= box[1]) & (w > 0))] = 0.0
        f = logits[local].T.astype(np.float64) - own_logit[None]
        norms = np.sqrt((w**2).sum(axis=2))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.abs(f) / norms
        ratio[yl[sel], np.arange(len(sel))] = np.inf
        ratio[~np.isfinite(ratio)] = np.inf
        best = ratio.argmin(axis=0)
        cols = np.arange(len(sel))
        w_best = w[best, cols]
        n_best = norms[best, cols]
        f_best = np.abs(f[best, cols])
        bad = (n_best < DEGENERATE_NORM) | ~np.isfinite(n_best) | ~np.isfinite(f_best)
        step = np.zeros_like(w_best)
        good = ~bad
        step[good] = (f_best[good] / n_best[good] ** 2)[:, None] * w_best[good]
        targets = idx[sel]
        total[targets] += step.reshape((len(sel),) + x.shape[1:])
        iters[targets[good]] += 1
        flagged[targets[bad]] = True
        active[targets[bad]] = False
    adv = _clip_box(x + (scale * total).astype(np.float32), box).astype(np.float32)
    return adv, flagged, iters


def generate(checkpoint: Checkpoint, images, labels, config: AttackConfig, audit: AuditLog | None = None) -> AdversarialBatch:
    m = config.method
    if m == "fgm":
        return _single_step(checkpoint, images, labels, config, False, audit)
    if m == "fgsm":
        return _single_step(checkpoint, images, labels, config, True, audit)
    if m == "ifgsm":
        return _iterative(checkpoint, images, labels, config, True, audit)
    if m == "ifgm":
        return _iterative(checkpoint, images, labels, config, False, audit)
    return deepfool_l2(checkpoint, images, labels, config.epsilon, config.iterations, config.box, audit)


# --------------------------------------------------------------------------
# on-disk form: manifest.json + IDX image payloads + per-sample CSV
# --------------------------------------------------------------------------


def save_batch(batch: AdversarialBatch, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cfg = batch.config
    manifest = {
        "method": cfg.method,
        "epsilon": cfg.epsilon,
        "iterations": cfg.iterations,
        "box": list(cfg.box) if cfg.box is not None else None,
        "clip_reference": cfg.clip_reference,
        "source_checkpoint": batch.source,
        "count": len(batch),
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    write_idx(d / "original-idx4-float", batch.original.astype(np.float32))
    write_idx(d / "adversarial-idx4-float", batch.adversarial.astype(np.float32))
    with open(d / "samples.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label", "l2", "linf", "flagged", "iterations"])
        for i in range(len(batch)):
            w.writerow([i, int(batch.labels[i]), f"{batch.l2[i]:.9g}", f"{batch.linf[i]:.9g}", int(batch.flagged[i]), int(batch.iterations[i])])
    return d


def load_batch(directory) -> AdversarialBatch:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    box = tuple(manifest["box"]) if manifest["box"] is not None else None
    cfg = AttackConfig(manifest["method"], manifest["epsilon"], manifest["iterations"], box, manifest["clip_reference"])
    original = np.array(read_idx(d / "original-idx4-float"), dtype=np.float32)
    adversarial = np.array(read_idx(d / "adversarial-idx4-float"), dtype=np.float32)
    with open(d / "samples.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    flagged = np.array([r["flagged"] == "1" for r in rows], dtype=bool)
    iters = np.array([int(r["iterations"]) for r in rows], dtype=np.int64)
    return AdversarialBatch(original, adversarial, labels, flagged, iters, manifest["source_checkpoint"], cfg)
