"""Neural-network building blocks: dense layers, vanilla LSTM cells,
Adam, and a finite-difference gradient oracle.

All parameters are float64 leaf tensors; weight init is uniform in
[-1/sqrt(fan_in), +1/sqrt(fan_in)] from a caller-supplied RNG so runs are
reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS = ("linear", "sigmoid", "tanh")


class ShapeError(ValueError):
    """Raised when tensor dimensions do not match a layer's expectation."""


def _activate(x, activation):
    if activation == "linear":
        return x
    if activation == "sigmoid":
        return ad.sigmoid(x)
    if activation == "tanh":
        return ad.tanh(x)
    raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")


def _init_weight(rng, out_dim, in_dim):
    limit = 1.0 / np.sqrt(in_dim)
    return ad.tensor(rng.uniform(-limit, limit, (out_dim, in_dim)), requires_grad=True)


class Dense:
    """Fully connected layer y = act(x @ W.T + b), weights shaped [out, in]."""

    def __init__(self, in_dim, out_dim, activation="linear", rng=None, name="dense"):
        if activation not in ACTIVATIONS:
            raise ValueError(
                f"unknown activation {activation!r}; expected one of {ACTIVATIONS}"
            )
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.activation = activation
        self.name = name
        self.weights = _init_weight(rng, out_dim, in_dim)
        self.bias = ad.tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.shape[-1] != self.in_dim:
            raise ShapeError(
                f"{self.name}: input has inner dimension {x.data.shape[-1]}, "
                f"layer expects {self.in_dim} (weights {self.weights.data.shape})"
            )
        return _activate(ad.add(ad.matmul(x, ad.transpose(self.weights)), self.bias),
                         self.activation)

    def params(self):
        return {f"{self.name}/weights": self.weights, f"{self.name}/bias": self.bias}


def dense_apply(x: Tensor, layer: Dense) -> Tensor:
    return layer(x)


class VlstmCell:
    """Vanilla LSTM cell.

    Gate inputs follow the concatenations of the governing recurrence:
    input and forget gates see [y, h_prev, c_prev], the cell candidate
    sees [y, h_prev], and the output gate sees [y, h_prev, c_cur].
    """

    def __init__(self, in_dim, hidden_dim, rng=None, name="vlstm"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.name = name
        wide = in_dim + 2 * hidden_dim
        slim = in_dim + hidden_dim
        self.w_i = _init_weight(rng, hidden_dim, wide)
        self.w_f = _init_weight(rng, hidden_dim, wide)
        self.w_z = _init_weight(rng, hidden_dim, slim)
        self.w_o = _init_weight(rng, hidden_dim, wide)
        self.b_i = ad.tensor(np.zeros(hidden_dim), requires_grad=True)
        self.b_f = ad.tensor(np.zeros(hidden_dim), requires_grad=True)
        self.b_z = ad.tensor(np.zeros(hidden_dim), requires_grad=True)
        self.b_o = ad.tensor(np.zeros(hidden_dim), requires_grad=True)

    def step(self, y: Tensor, h_prev: Tensor, c_prev: Tensor):
        if y.data.shape[-1] != self.in_dim:
            raise ShapeError(
                f"{self.name}: input width {y.data.shape[-1]} != cell in_dim {self.in_dim}"
            )
        if h_prev.data.shape[-1] != self.hidden_dim or c_prev.data.shape[-1] != self.hidden_dim:
            raise ShapeError(
                f"{self.name}: state width mismatch, hidden_dim={self.hidden_dim}, "
                f"got h {h_prev.data.shape} c {c_prev.data.shape}"
            )
        yhc = ad.concat([y, h_prev, c_prev], axis=1)
        yh = ad.concat([y, h_prev], axis=1)
        gate_i = ad.sigmoid(ad.add(ad.matmul(yhc, ad.transpose(self.w_i)), self.b_i))
        gate_f = ad.sigmoid(ad.add(ad.matmul(yhc, ad.transpose(self.w_f)), self.b_f))
        cand = ad.tanh(ad.add(ad.matmul(yh, ad.transpose(self.w_z)), self.b_z))
        c_cur = ad.add(ad.mul(gate_f, c_prev), ad.mul(gate_i, cand))
        yhc_out = ad.concat([y, h_prev, c_cur], axis=1)
        gate_o = ad.sigmoid(ad.add(ad.matmul(yhc_out, ad.transpose(self.w_o)), self.b_o))
        h_cur = ad.mul(gate_o, ad.tanh(c_cur))
        return h_cur, c_cur

    def params(self):
        return {
            f"{self.name}/w_i": self.w_i, f"{self.name}/b_i": self.b_i,
            f"{self.name}/w_f": self.w_f, f"{self.name}/b_f": self.b_f,
            f"{self.name}/w_z": self.w_z, f"{self.name}/b_z": self.b_z,
            f"{self.name}/w_o": self.w_o, f"{self.name}/b_o": self.b_o,
        }


def vlstm_step(y, h_prev, c_prev, cell: VlstmCell):
    return cell.step(y, h_prev, c_prev)


class FeedForward:
    """A stack of dense layers; the critic architecture."""

    def __init__(self, dims, activations, rng=None, name="ff"):
        if len(dims) - 1 != len(activations):
            raise ValueError("need one activation per layer")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.layers = [
            Dense(dims[i], dims[i + 1], activations[i], rng, name=f"{name}/layer{i}")
            for i in range(len(activations))
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def params(self):
        out = {}
        for layer in self.layers:
            out.update(layer.params())
        return out


@dataclass
class Tape:
    """Forward record: input leaf, output node, and the network used."""

    input: Tensor
    output: Tensor
    net: object


def network_forward(net, x) -> tuple[Tensor, Tape]:
    x_leaf = ad.tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    out = net(x_leaf)
    return out, Tape(input=x_leaf, output=out, net=net)


def network_backward(tape: Tape, output_gradient):
    """Exact reverse-mode gradients of sum(output * output_gradient)."""
    gout = np.asarray(output_gradient, dtype=np.float64)
    if gout.shape != tape.output.data.shape:
        raise ShapeError(
            f"output_gradient shape {gout.shape} != output shape {tape.output.data.shape}"
        )
    params = tape.net.params()
    names = list(params)
    leaves = [params[k] for k in names] + [tape.input]
    grads = ad.grad(tape.output, leaves, out_grad=gout)
    param_grads = {k: g.data for k, g in zip(names, grads[:-1])}
    return param_grads, grads[-1].data


def gradient_penalty_backward(critic, x_hat, eta):
    """Penalty eta*mean((‖∇_u D(u)‖₂ - 1)²) over the rows of x_hat, and its
    exact parameter gradients via double backprop."""
    if eta < 0:
        raise ValueError("penalty coefficient must be non-negative")
    u = ad.tensor(np.asarray(x_hat, dtype=np.float64), requires_grad=True)
    out = critic(u)
    g_input = ad.grad(ad.tsum(out), [u])[0]
    norms = ad.l2_norm_rows(g_input)
    gap = ad.sub(norms, ad.constant(1.0))
    penalty = ad.mul(ad.constant(float(eta)), ad.tmean(ad.mul(gap, gap)))
    params = critic.params()
    names = list(params)
    grads = ad.grad(penalty, [params[k] for k in names])
    return float(penalty.data), {k: g.data for k, g in zip(names, grads)}


# ---------------------------------------------------------------------------
# optimization


@dataclass
class AdamConfig:
    alpha: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    epsilon_stability: float = 1e-8

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if not self.epsilon_stability > 0:
            raise ValueError("epsilon_stability must be positive")


@dataclass
class AdamState:
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    step_count: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(
            first_moment={k: np.zeros_like(_data(v)) for k, v in params.items()},
            second_moment={k: np.zeros_like(_data(v)) for k, v in params.items()},
            step_count=0,
        )


def _data(p):
    return p.data if isinstance(p, Tensor) else p


def adam_step(params, grads, state: AdamState, cfg: AdamConfig):
    """One bias-corrected Adam update, applied in place to params.

    Epsilon sits inside the square root: theta -= alpha * m_hat / sqrt(v_hat + eps).
    """
    state.step_count += 1
    t = state.step_count
    for key, p in params.items():
        g = np.asarray(grads[key], dtype=np.float64)
        arr = _data(p)
        if g.shape != arr.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {arr.shape} for {key}")
        m = state.first_moment[key]
        v = state.second_moment[key]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1 ** t)
        v_hat = v / (1 - cfg.beta2 ** t)
        arr -= cfg.alpha * m_hat / np.sqrt(v_hat + cfg.epsilon_stability)
    return params, state


# ---------------------------------------------------------------------------
# finite-difference oracle


def finite_difference_gradient(loss_fn, params, h=1e-5):
    """Central differences (L(p+h) - L(p-h)) / 2h per coordinate.

    `params` is a dict name -> array; `loss_fn(params) -> float` must be a
    pure function of the values.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    grads = {}
    for key, value in params.items():
        arr = np.array(_data(value), dtype=np.float64)
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = _eval_loss(loss_fn, params, key, arr)
            flat[i] = orig - h
            down = _eval_loss(loss_fn, params, key, arr)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        grads[key] = g
    return grads


def _eval_loss(loss_fn, params, key, perturbed):
    probe = {k: (perturbed if k == key else _data(v)) for k, v in params.items()}
    value = float(loss_fn(probe))
    if not np.isfinite(value):
        raise ValueError(f"loss is non-finite while perturbing {key}")
    return value
