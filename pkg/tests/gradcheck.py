"""Finite-difference oracle for random small networks built from the autodiff ops."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from transferlab import autodiff as ad

STEP = 1e-3
DENOM_FLOOR = 1e-8  # guards the relative error against exactly-zero gradients


@dataclass
class Net:
    layers: list[tuple]  # ("conv", k, out) | ("pool",) | ("relu",) | ("dense", out)
    input_shape: tuple[int, int, int, int]
    params: dict[str, np.ndarray]
    labels: np.ndarray

    def run(self, x: np.ndarray, params: dict[str, np.ndarray], grad: bool = False):
        """Forward pass; returns (loss tensor, leaf tensors, kink signature)."""
        xt = ad.Tensor(x, requires_grad=grad)
        leaves = {n: ad.Tensor(v, requires_grad=grad) for n, v in params.items()}
        h = xt
        signature = []
        for i, layer in enumerate(self.layers):
            kind = layer[0]
            if kind == "conv":
                h = ad.conv2d(h, leaves[f"{i}.w"], leaves[f"{i}.b"])
            elif kind == "dense":
                if h.data.ndim > 2:
                    h = ad.flatten(h)
                h = ad.dense(h, leaves[f"{i}.w"], leaves[f"{i}.b"])
            elif kind == "relu":
                signature.append(h.data > 0)
                h = ad.relu(h)
            elif kind == "pool":
                n, c, hh, ww = h.shape
                win = h.data.reshape(n, c, hh // 2, 2, ww // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, hh // 2, ww // 2, 4)
                signature.append(win.argmax(axis=-1))
                h = ad.maxpool2(h)
        if h.data.ndim > 2:
            h = ad.flatten(h)
        loss = ad.softmax_cross_entropy(h, self.labels)
        return loss, xt, leaves, signature


def random_net(rng: np.random.Generator) -> tuple[Net, np.ndarray]:
    """A random conv/pool/relu/dense stack of at most 4 layers ending in a dense classifier."""
    n, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    size = int(rng.choice([6, 8, 10]))
    shape = (n, c, size, size)
    layers: list[tuple] = []
    params: dict[str, np.ndarray] = {}
    cur = shape[1:]
    body = int(rng.integers(0, 4))
    for _ in range(body):
        options = ["relu", "dense"]
        if len(cur) == 3 and cur[1] >= 3:
            options.append("conv")
        if len(cur) == 3 and cur[1] % 2 == 0 and cur[1] >= 2:
            options.append("pool")
        kind = str(rng.choice(options))
        i = len(layers)
        if kind == "conv":
            k = int(rng.integers(1, min(3, cur[1]) + 1))
            out = int(rng.integers(1, 4))
            params[f"{i}.w"] = rng.normal(0, 0.5, (out, cur[0], k, k))
            params[f"{i}.b"] = rng.normal(0, 0.1, out)
            layers.append(("conv", k, out))
            cur = (out, cur[1] - k + 1, cur[2] - k + 1)
        elif kind == "pool":
            layers.append(("pool",))
            cur = (cur[0], cur[1] // 2, cur[2] // 2)
        elif kind == "relu":
            layers.append(("relu",))
        else:
            fin = int(np.prod(cur))
            out = int(rng.integers(2, 8))
            params[f"{i}.w"] = rng.normal(0, 1 / np.sqrt(fin), (fin, out))
            params[f"{i}.b"] = rng.normal(0, 0.1, out)
            layers.append(("dense", out))
            cur = (out,)
    i = len(layers)
    fin = int(np.prod(cur))
    classes = int(rng.integers(2, 6))
    params[f"{i}.w"] = rng.normal(0, 1 / np.sqrt(fin), (fin, classes))
    params[f"{i}.b"] = rng.normal(0, 0.1, classes)
    layers.append(("dense", classes))
    labels = rng.integers(0, classes, n)
    x = rng.uniform(-1, 1, shape)
    return Net(layers, shape, params, labels), x


def _same(a, b) -> bool:
    return all(np.array_equal(p, q) for p, q in zip(a, b))


def check_net(net: Net, x: np.ndarray, rng: np.random.Generator, probes: int = 6) -> tuple[float, int, int]:
    """Largest relative error over probed coordinates of input and parameters.

    Returns (max_rel_err, probes_checked, probes_skipped_at_kinks).
    """
    loss, xt, leaves, sig0 = net.run(x, net.params, grad=True)
    targets = [xt, *leaves.values()]
    grads = ad.backward(loss, targets)
    worst, checked, skipped = 0.0, 0, 0
    arrays = [("x", x)] + list(net.params.items())
    for (name, arr), t in zip(arrays, targets):
        analytic = grads[t].data
        flat = rng.choice(arr.size, size=min(probes, arr.size), replace=False)
        for j in flat:
            idx = np.unravel_index(j, arr.shape)
            vals = []
            kink = False
            for sign in (1, -1):
                pert = arr.copy()
                pert[idx] += sign * STEP
                xs = pert if name == "x" else x
                ps = net.params if name == "x" else {**net.params, name: pert}
                lo, _, _, sig = net.run(xs, ps)
                kink |= not _same(sig, sig0)
                vals.append(lo.item())
            if kink:
                skipped += 1
                continue
            numeric = (vals[0] - vals[1]) / (2 * STEP)
            a = float(analytic[idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), DENOM_FLOOR)
            worst = max(worst, err)
            checked += 1
    return worst, checked, skipped
