"""Small fully connected networks with exact gradients, Adam and target-network updates.

Everything is float64 numpy. Inputs may be a single vector ``(in,)`` or a
batch ``(batch, in)``; outputs follow the same convention.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from gaugerl.errors import DimensionMismatch

CHECKPOINT_VERSION = 1

# largest double strictly below 1: keeps the saturating head inside the open unit ball
_OPEN_ONE = float(np.nextafter(1.0, 0.0))


@dataclass
class Mlp:
    """ReLU network with an identity or saturating (scaled sigmoid) output head.

    The saturating head is ``2 * sigmoid(steepness * z) - 1``, i.e.
    ``tanh(steepness * z / 2)``, so every output component lies in (-1, 1).
    ``in_scale`` (optional) divides the input elementwise before the first layer.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    output: str = "saturating"
    steepness: float = 1.0
    in_scale: np.ndarray | None = None

    def __post_init__(self):
        if self.output not in ("saturating", "identity"):
            raise ValueError(f"unknown output head {self.output!r}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[0] != b.shape[0]:
                raise DimensionMismatch(f"layer {k}: W {W.shape} vs b {b.shape}")
            if k and W.shape[1] != self.weights[k - 1].shape[0]:
                raise DimensionMismatch(f"layer {k} input width does not match layer {k - 1}")
        if self.in_scale is not None:
            self.in_scale = np.asarray(self.in_scale, dtype=float)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.output,
                   self.steepness, None if self.in_scale is None else self.in_scale.copy())

    def __call__(self, x) -> np.ndarray:
        return predict(self, x)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, theta: np.ndarray) -> None:
        i = 0
        for p in self.params:
            p[...] = theta[i:i + p.size].reshape(p.shape)
            i += p.size


def init_mlp(widths, rng: np.random.Generator, output: str = "saturating", steepness: float = 1.0,
             final_scale: float = 0.01, in_scale=None) -> Mlp:
    """Uniform fan-in initialization; the last layer is shrunk by ``final_scale``."""
    weights, biases = [], []
    for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        if k == len(widths) - 2:
            bound *= final_scale
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return Mlp(weights, biases, output, steepness, in_scale)


def forward(net: Mlp, x):
    """Return ``(output, cache)``; the cache feeds :func:`backward`."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.weights[0].shape[1]:
        raise DimensionMismatch(f"input width {x.shape[-1]}, network expects {net.weights[0].shape[1]}")
    h = x if net.in_scale is None else x / net.in_scale
    acts = [h]
    last = len(net.weights) - 1
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ W.T + b
        if k < last:
            h = np.maximum(z, 0.0)
        elif net.output == "saturating":
            h = np.clip(np.tanh(0.5 * net.steepness * z), -_OPEN_ONE, _OPEN_ONE)
        else:
            h = z
        acts.append(h)
    return h, acts


def predict(net: Mlp, x) -> np.ndarray:
    """Output only; skips the cache and shape checks of :func:`forward` (hot path)."""
    h = x if net.in_scale is None else x / net.in_scale
    W, b = net.weights, net.biases
    last = len(W) - 1
    for k in range(last):
        h = np.maximum(W[k] @ h + b[k], 0.0) if h.ndim == 1 else np.maximum(h @ W[k].T + b[k], 0.0)
    z = W[last] @ h + b[last] if h.ndim == 1 else h @ W[last].T + b[last]
    if net.output == "identity":
        return z
    return np.minimum(np.maximum(np.tanh(0.5 * net.steepness * z), -_OPEN_ONE), _OPEN_ONE)


def backward(net: Mlp, cache, output_grad):
    """Gradients of ``sum(output * output_grad)``: returns ``(param_grads, input_grad)``.

    ``param_grads`` is ordered like ``net.params`` ([W0, b0, W1, b1, ...]).
    The ReLU subgradient at 0 is taken as 0.
    """
    acts = cache
    g = np.asarray(output_grad, dtype=float)
    if g.shape != acts[-1].shape:
        raise DimensionMismatch(f"output_grad shape {g.shape} vs output {acts[-1].shape}")
    last = len(net.weights) - 1
    if net.output == "saturating":
        y = acts[-1]
        g = g * (0.5 * net.steepness) * (1.0 - y * y)
    grads = [None] * (2 * len(net.weights))
    for k in range(last, -1, -1):
        h_in = acts[k]
        if g.ndim == 1:
            grads[2 * k] = np.outer(g, h_in)
            grads[2 * k + 1] = g.copy()
        else:
            grads[2 * k] = g.T @ h_in
            grads[2 * k + 1] = g.sum(axis=0)
        g = g @ net.weights[k]
        if k > 0:
            g = g * (acts[k] > 0.0)
    if net.in_scale is not None:
        g = g / net.in_scale
    return grads, g


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr: float, **kw) -> "AdamState":
        return cls(lr, m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **kw)


def adam_step(state: AdamState, params, grads):
    """In-place bias-corrected Adam update; returns ``(params, state)``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionMismatch("params, grads and optimizer state differ in length")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def soft_update(target: Mlp, online: Mlp, rho: float) -> Mlp:
    """``target <- rho * online + (1 - rho) * target`` in place."""
    if not 0.0 < rho <= 1.0:
        raise ValueError("rho must lie in (0, 1]")
    for pt, po in zip(target.params, online.params):
        if pt.shape != po.shape:
            raise DimensionMismatch("target and online networks differ in shape")
        pt *= 1.0 - rho
        pt += rho * po
    return target


def _net_to_arrays(prefix: str, net: Mlp) -> dict:
    out = {f"{prefix}/meta": np.array(json.dumps({
        "output": net.output, "steepness": net.steepness, "layers": len(net.weights),
        "widths": net.widths, "in_scale": None if net.in_scale is None else net.in_scale.tolist(),
    }))}
    for k, p in enumerate(net.params):
        out[f"{prefix}/p{k}"] = p
    return out


def _net_from_arrays(prefix: str, data) -> Mlp:
    meta = json.loads(str(data[f"{prefix}/meta"]))
    ps = [np.array(data[f"{prefix}/p{k}"]) for k in range(2 * meta["layers"])]
    return Mlp(ps[0::2], ps[1::2], meta["output"], meta["steepness"],
               None if meta["in_scale"] is None else np.array(meta["in_scale"]))


def save_checkpoint(path, nets: dict[str, Mlp], optimizers: dict[str, AdamState] | None = None,
                    seed: int | None = None, extra: dict | None = None) -> None:
    arrays = {"version": np.array(CHECKPOINT_VERSION),
              "header": np.array(json.dumps({"seed": seed, "nets": sorted(nets), "extra": extra or {}}))}
    for name, net in nets.items():
        arrays.update(_net_to_arrays(name, net))
    for name, opt in (optimizers or {}).items():
        arrays[f"opt:{name}/meta"] = np.array(json.dumps(
            {"lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps, "t": opt.t, "n": len(opt.m)}))
        for k, (m, v) in enumerate(zip(opt.m, opt.v)):
            arrays[f"opt:{name}/m{k}"] = m
            arrays[f"opt:{name}/v{k}"] = v
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Return ``(nets, optimizers, header)``."""
    with np.load(path) as data:
        version = int(data["version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(str(data["header"]))
        nets = {name: _net_from_arrays(name, data) for name in header["nets"]}
        opts = {}
        for key in data.files:
            if key.startswith("opt:") and key.endswith("/meta"):
                name = key[4:-5]
                meta = json.loads(str(data[key]))
                opts[name] = AdamState(meta["lr"], meta["beta1"], meta["beta2"], meta["eps"], meta["t"],
                                       [np.array(data[f"opt:{name}/m{k}"]) for k in range(meta["n"])],
                                       [np.array(data[f"opt:{name}/v{k}"]) for k in range(meta["n"])])
    return nets, opts, header
