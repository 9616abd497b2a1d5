"""Finite-difference verification of the reverse-mode gradients.

Each check builds a small network, computes parameter gradients through
the graph, recomputes them by central differences, and reports the worst
relative error max(|a - b|) / max(1, |a|, |b|) over all coordinates.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .models import (
    BASELINE_VARIANTS,
    CriticModel,
    EncoderModel,
    GeneratorModel,
    JointPair,
    ModelConfig,
    baseline_loss,
    critic_loss,
    error_feedbacks,
)
from .nn import Dense, FeedForward, VlstmCell, finite_difference_gradient


def _rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0


def _compare(analytic: dict, numeric: dict):
    return max(_rel_err(analytic[k], numeric[k]) for k in analytic)


def _check_net(net, x, loss_of_out, h=1e-5):
    """Compare graph gradients of loss_of_out(net(x)) against central
    differences over every parameter."""
    params = net.params()
    names = list(params)

    def scalar_loss(probe):
        saved = {k: params[k].data for k in names}
        for k in names:
            params[k].data = probe[k]
        try:
            return float(loss_of_out(net(ad.tensor(x))).data)
        finally:
            for k in names:
                params[k].data = saved[k]

    loss = loss_of_out(net(ad.tensor(x)))
    grads = ad.grad(loss, [params[k] for k in names])
    analytic = {k: g.data for k, g in zip(names, grads)}
    numeric = finite_difference_gradient(scalar_loss, params, h)
    return _compare(analytic, numeric)


class _LstmWrap:
    """Unrolls a cell for a few steps so it can be checked like a network."""

    def __init__(self, cell, steps):
        self.cell = cell
        self.steps = steps

    def __call__(self, x):
        batch = x.data.shape[0]
        h = c = ad.zeros((batch, self.cell.hidden_dim))
        for _ in range(self.steps):
            h, c = self.cell.step(x, h, c)
        return h

    def params(self):
        return self.cell.params()


def _quad_loss(out):
    return ad.tmean(ad.mul(out, out))


def _abs_like_loss(out):
    # smooth stand-in for L1 shapes: mean(tanh(out) * out)
    return ad.tmean(ad.mul(ad.tanh(out), out))


def run_gradcheck(seed=0, verbose=False):
    """Run every configuration; returns the worst relative error."""
    rng = np.random.default_rng(seed)
    results = []

    def record(name, err):
        results.append((name, err))
        if verbose:
            print(f"{name}: {err:.3e}")

    # dense layers across activations and shapes
    for act in ("linear", "sigmoid", "tanh"):
        for in_dim, out_dim, batch in ((3, 2, 4), (5, 5, 1), (4, 3, 2)):
            layer = Dense(in_dim, out_dim, act, rng, name=f"gc/{act}")
            x = rng.standard_normal((batch, in_dim))
            record(f"dense[{act},{in_dim}x{out_dim}]", _check_net(layer, x, _quad_loss))

    # feedforward stacks, including a sigmoid head
    for dims, acts in (
        ([4, 6, 1], ["tanh", "linear"]),
        ([3, 5, 4, 1], ["tanh", "tanh", "sigmoid"]),
    ):
        net = FeedForward(dims, acts, rng, name="gc/ff")
        x = rng.standard_normal((3, dims[0]))
        record(f"ff{dims}", _check_net(net, x, _quad_loss))

    # recurrent cells unrolled over several steps
    for in_dim, hidden, steps in ((3, 4, 1), (2, 3, 3), (4, 2, 5)):
        cell = VlstmCell(in_dim, hidden, rng, name="gc/lstm")
        x = rng.standard_normal((2, in_dim))
        record(f"vlstm[{in_dim}->{hidden},T={steps}]",
               _check_net(_LstmWrap(cell, steps), x, _quad_loss))

    # full sequence models on a reduced architecture
    cfg = ModelConfig(features=3, window=3, latent_dim=2,
                      gen_hidden=(3, 3), critic_hidden=(4, 3))
    gen = GeneratorModel(cfg, rng)
    z = rng.standard_normal((2, cfg.latent_dim))
    record("generator", _check_net(gen, z, _quad_loss))
    record("generator/abs", _check_net(gen, z, _abs_like_loss))

    enc = EncoderModel(cfg, rng)
    xw = rng.standard_normal((2, cfg.window, cfg.features))
    record("encoder", _check_net(enc, xw, _quad_loss))

    for head in ("linear", "sigmoid"):
        dcfg = ModelConfig(features=3, window=3, latent_dim=2,
                           gen_hidden=(3, 3), critic_hidden=(4, 3), head_mode=head)
        critic = CriticModel(dcfg, rng)
        u = rng.standard_normal((3, dcfg.pair_dim))
        record(f"critic[{head}]", _check_net(critic, u, _quad_loss))

    # full critic objective with the gradient penalty (second derivatives)
    for eta in (0.0, 1.0, 10.0):
        dcfg = ModelConfig(features=2, window=2, latent_dim=2,
                           gen_hidden=(3, 3), critic_hidden=(4, 3))
        critic = CriticModel(dcfg, rng)
        m = 3
        real = JointPair(rng.standard_normal((m, 2, 2)), rng.standard_normal((m, 2)), "real")
        fake = JointPair(rng.standard_normal((m, 2, 2)), rng.standard_normal((m, 2)), "fake")
        eps = rng.uniform(0.0, 1.0, m)
        params = critic.params()
        names = list(params)

        def penalty_loss(probe, critic=critic, names=names, params=params,
                         real=real, fake=fake, eps=eps, eta=eta):
            saved = {k: params[k].data for k in names}
            for k in names:
                params[k].data = probe[k]
            try:
                return critic_loss(critic, real, fake, eps, eta).value
            finally:
                for k in names:
                    params[k].data = saved[k]

        analytic = critic_loss(critic, real, fake, eps, eta).param_grads
        numeric = finite_difference_gradient(penalty_loss, params, 1e-5)
        record(f"critic_loss[eta={eta}]", _compare(analytic, numeric))

    # per-example error feedbacks vs finite differences on the inputs
    for m in (2, 4):
        dcfg = ModelConfig(features=2, window=2, latent_dim=2,
                           gen_hidden=(3, 3), critic_hidden=(4, 3))
        critic = CriticModel(dcfg, rng)
        real_flat = rng.standard_normal((m, dcfg.pair_dim))
        fake_flat = rng.standard_normal((m, dcfg.pair_dim))

        def _pair(flat, prov, dcfg=dcfg, m=m):
            data_len = dcfg.window * dcfg.features
            return JointPair(flat[:, :data_len].reshape(m, dcfg.window, dcfg.features),
                             flat[:, data_len:], prov)

        def fb_loss(probe, critic=critic, m=m):
            from .models import eg_local_loss
            return eg_local_loss(critic, _pair(probe["real"], "real"),
                                 _pair(probe["fake"], "fake"))

        f_e, f_g = error_feedbacks(critic, _pair(real_flat, "real"), _pair(fake_flat, "fake"))
        numeric = finite_difference_gradient(fb_loss, {"real": real_flat, "fake": fake_flat})
        record(f"feedbacks[M={m}]", _compare({"real": f_e, "fake": f_g}, numeric))

    # baseline objective gradients for every variant
    for variant in BASELINE_VARIANTS:
        dcfg = ModelConfig(features=2, window=2, latent_dim=2,
                           gen_hidden=(3, 3), critic_hidden=(4, 3),
                           head_mode="sigmoid" if variant in ("gan", "bigan") else "linear")
        m = 3
        data_dim = dcfg.window * dcfg.features
        paired = variant == "bigan"
        critic = CriticModel(dcfg, rng, input_dim=None if paired else data_dim)
        if paired:
            real = JointPair(rng.standard_normal((m, 2, 2)), rng.standard_normal((m, 2)), "real")
            fake = JointPair(rng.standard_normal((m, 2, 2)), rng.standard_normal((m, 2)), "fake")
        else:
            real = rng.standard_normal((m, 2, 2))
            fake = rng.standard_normal((m, 2, 2))
        eps = rng.uniform(0.0, 1.0, m) if variant == "wgan_gp" else None
        params = critic.params()
        names = list(params)

        def var_loss(probe, critic=critic, names=names, params=params,
                     real=real, fake=fake, eps=eps, variant=variant):
            saved = {k: params[k].data for k in names}
            for k in names:
                params[k].data = probe[k]
            try:
                return baseline_loss(variant, critic, real, fake, eps=eps).d_loss
            finally:
                for k in names:
                    params[k].data = saved[k]

        analytic = baseline_loss(variant, critic, real, fake, eps=eps).d_grads
        numeric = finite_difference_gradient(var_loss, params, 1e-5)
        record(f"baseline[{variant}]", _compare(analytic, numeric))

    return max(err for _, err in results)
