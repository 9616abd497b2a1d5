"""Three-tier split training: critic rounds on VM monitors, error-feedback
driven generator/encoder updates on slice managers, and weighted parameter
averaging on the network controller.

All randomness derives from the run seed through fixed SeedSequence
entropy tuples, so every mode is bit-reproducible and the mode lattice
holds: federated with one slice and L=1 equals distributed with one
slice, and distributed with one monitor equals standalone training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import wire
from .ledger import CostLedger, PhaseTimer
from .models import (
    CriticModel,
    EncoderModel,
    GeneratorModel,
    JointPair,
    ModelConfig,
    NoiseSpec,
    critic_loss,
    eg_local_loss,
    error_feedbacks,
)
from .nn import AdamConfig, AdamState, adam_step

MODES = ("centralized", "standalone", "distributed", "federated")

# seed-derivation tags (arbitrary distinct constants)
_SEED_GLOBAL_MODELS = 101
_SEED_CRITIC = 202
_SEED_MONITOR_STREAM = 303
_SEED_NOISE = 404


class ProtocolError(RuntimeError):
    pass


@dataclass
class TopologySpec:
    slices: int
    monitors_per_slice: int

    def __post_init__(self):
        if self.slices < 1 or self.monitors_per_slice < 1:
            raise ValueError("topology needs at least one slice and one monitor")


@dataclass
class TrainingConfig:
    mode: str = "federated"
    iterations: int = 500
    critic_iters: int = 5
    local_iters: int = 10
    batch_size: int = 64
    eta: float = 10.0
    adam: AdamConfig = field(default_factory=AdamConfig)
    noise: str = "normal"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(
                f"unknown mode {self.mode!r}; valid modes are {', '.join(MODES)}"
            )
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if min(self.critic_iters, self.local_iters, self.batch_size) < 1:
            raise ValueError("critic_iters, local_iters and batch_size must be >= 1")
        if self.eta < 0:
            raise ValueError("eta must be non-negative")


@dataclass
class GenPacket:
    slice_id: int
    monitor_id: int
    iteration: int
    latent_real: np.ndarray  # f_n = E(X_n), [M, latent]
    noise: np.ndarray  # z_n, [M, latent]
    fake_data: np.ndarray  # G(z_n), [M, t, features]

    def __post_init__(self):
        if not (len(self.latent_real) == len(self.noise) == len(self.fake_data)):
            raise ProtocolError("gen packet tensors must share batch size")


@dataclass
class FeedbackPacket:
    slice_id: int
    monitor_id: int
    iteration: int
    encoder_feedback: np.ndarray  # F_E, [M, t*features + latent]
    generator_feedback: np.ndarray  # F_G, same shape

    def __post_init__(self):
        if self.encoder_feedback.shape != self.generator_feedback.shape:
            raise ProtocolError("feedback tensors must share shape")


@dataclass
class SliceWeights:
    counts: list  # Q_s per slice, ascending slice id

    def __post_init__(self):
        if any(q < 0 for q in self.counts):
            raise ValueError("training-record counts must be non-negative")
        if sum(self.counts) <= 0:
            raise ValueError("total training-record count must be positive")

    @property
    def total(self):
        return sum(self.counts)


class Bus:
    """In-process transport: every send serializes the message for real so
    byte counts in the ledger are exact, then hands back the decoded copy."""

    def __init__(self, ledger: CostLedger):
        self.ledger = ledger

    def send(self, msg: wire.Message, link: str) -> wire.Message:
        encoded = wire.encode_message(msg)
        payload = wire.payload_bytes(msg.tensors)
        self.ledger.add_message(
            msg.iteration, link, wire.MSG_NAMES[msg.msg_type],
            payload, len(encoded) - payload,
        )
        return wire.decode_message(encoded)


# ---------------------------------------------------------------------------
# nodes


def _seeded_rng(*entropy):
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


class MonitorNode:
    """Hosts one critic and one training-data shard."""

    def __init__(self, slice_id, monitor_id, shard, model_cfg: ModelConfig,
                 cfg: TrainingConfig, seed):
        self.slice_id = slice_id
        self.monitor_id = monitor_id
        self.shard = np.asarray(shard, dtype=np.float64)
        if self.shard.ndim != 3:
            raise ValueError("shard must be [windows, t, features]")
        # canonical name so checkpoints reload into a fresh CriticModel
        self.critic = CriticModel(
            model_cfg, _seeded_rng(seed, _SEED_CRITIC, slice_id, monitor_id),
        )
        self.adam_state = AdamState.for_params(self.critic.params())
        self.cfg = cfg
        self.stream = _seeded_rng(seed, _SEED_MONITOR_STREAM, slice_id, monitor_id)

    def sample_batch(self):
        idx = self.stream.integers(0, self.shard.shape[0], size=self.cfg.batch_size)
        return self.shard[idx]


class ManagerNode:
    """Hosts the slice's generator and encoder."""

    def __init__(self, slice_id, model_cfg: ModelConfig, cfg: TrainingConfig, seed):
        self.slice_id = slice_id
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.seed = seed
        rng = _seeded_rng(seed, _SEED_GLOBAL_MODELS)
        self.generator = GeneratorModel(model_cfg, rng)
        self.encoder = EncoderModel(model_cfg, rng)
        self.gen_adam = AdamState.for_params(self.generator.params())
        self.enc_adam = AdamState.for_params(self.encoder.params())
        self.noise_spec = NoiseSpec(cfg.noise, model_cfg.latent_dim)
        self._tapes = {}

    def params(self):
        return {"generator": self.generator.params(), "encoder": self.encoder.params()}


def monitor_round(monitor: MonitorNode, x_batch, packet: GenPacket, critic_iters, eta):
    """K critic Adam updates on the received pairs, then the local EG loss
    and per-example error feedbacks computed with the updated critic."""
    m = x_batch.shape[0]
    if len(packet.noise) != m:
        raise ProtocolError(
            f"batch size mismatch: monitor batch {m}, packet {len(packet.noise)}"
        )
    real = JointPair(x_batch, packet.latent_real, "real")
    fake = JointPair(packet.fake_data, packet.noise, "fake")
    last = None
    for _ in range(critic_iters):
        eps = monitor.stream.uniform(0.0, 1.0, m)
        last = critic_loss(monitor.critic, real, fake, eps, eta)
        adam_step(monitor.critic.params(), last.param_grads, monitor.adam_state,
                  monitor.cfg.adam)
    eg = eg_local_loss(monitor.critic, real, fake)
    f_e, f_g = error_feedbacks(monitor.critic, real, fake)
    feedback = FeedbackPacket(
        slice_id=monitor.slice_id,
        monitor_id=monitor.monitor_id,
        iteration=packet.iteration,
        encoder_feedback=f_e,
        generator_feedback=f_g,
    )
    return feedback, last.value, eg


def manager_generate(manager: ManagerNode, batches: dict, iteration) -> dict:
    """Encode each monitor's batch, sample its noise stream, generate fake
    windows; keeps the forward tapes for the later chain-rule update."""
    if not batches:
        raise ProtocolError("no monitor batches received")
    manager._tapes = {}
    packets = {}
    for monitor_id in sorted(batches):
        x = np.asarray(batches[monitor_id], dtype=np.float64)
        if x.size == 0:
            raise ProtocolError(f"monitor {monitor_id} sent an empty batch")
        x_t = ad.tensor(x)
        f_t = manager.encoder(x_t)
        rng = _seeded_rng(manager.seed, _SEED_NOISE, manager.slice_id, iteration, monitor_id)
        z = manager.noise_spec.sample(rng, x.shape[0])
        z_t = ad.tensor(z)
        xbar_t = manager.generator(z_t)
        manager._tapes[monitor_id] = (f_t, xbar_t)
        packets[monitor_id] = GenPacket(
            slice_id=manager.slice_id,
            monitor_id=monitor_id,
            iteration=iteration,
            latent_real=f_t.data,
            noise=z,
            fake_data=xbar_t.data,
        )
    return packets


def assemble_manager_gradients(manager: ManagerNode, feedbacks: list[FeedbackPacket],
                               iteration):
    """Chain-rule the error feedbacks through the generation tapes into
    parameter gradients of the mean local EG loss over monitors."""
    expected = set(manager._tapes)
    seen = {}
    for fb in feedbacks:
        if fb.iteration != iteration:
            raise ProtocolError(
                f"feedback from monitor {fb.monitor_id} is for iteration "
                f"{fb.iteration}, expected {iteration}"
            )
        if fb.monitor_id in seen:
            raise ProtocolError(f"duplicate feedback from monitor {fb.monitor_id}")
        if fb.monitor_id not in expected:
            raise ProtocolError(f"feedback from unknown monitor {fb.monitor_id}")
        seen[fb.monitor_id] = fb
    missing = expected - set(seen)
    if missing:
        raise ProtocolError(f"missing feedback from monitors {sorted(missing)}")

    n = len(seen)
    cfg = manager.model_cfg
    data_len = cfg.window * cfg.features
    g_params = manager.generator.params()
    e_params = manager.encoder.params()
    g_names, e_names = list(g_params), list(e_params)
    g_acc = {k: np.zeros_like(g_params[k].data) for k in g_names}
    e_acc = {k: np.zeros_like(e_params[k].data) for k in e_names}
    for monitor_id in sorted(seen):
        fb = seen[monitor_id]
        f_t, xbar_t = manager._tapes[monitor_id]
        m = fb.encoder_feedback.shape[0]
        # only the latent part of F_E reaches theta_E (the data part is the
        # raw input), and only the data part of F_G reaches theta_G
        cot_f = fb.encoder_feedback[:, data_len:] / n
        cot_x = fb.generator_feedback[:, :data_len].reshape(m, cfg.window, cfg.features) / n
        for k, g in zip(e_names, ad.grad(f_t, [e_params[k] for k in e_names], out_grad=cot_f)):
            e_acc[k] += g.data
        for k, g in zip(g_names, ad.grad(xbar_t, [g_params[k] for k in g_names], out_grad=cot_x)):
            g_acc[k] += g.data
    return g_acc, e_acc


def manager_update(manager: ManagerNode, feedbacks: list[FeedbackPacket], iteration):
    """Assemble gradients from all feedbacks and apply one Adam step to
    the generator and one to the encoder."""
    g_grads, e_grads = assemble_manager_gradients(manager, feedbacks, iteration)
    adam_step(manager.generator.params(), g_grads, manager.gen_adam, manager.cfg.adam)
    adam_step(manager.encoder.params(), e_grads, manager.enc_adam, manager.cfg.adam)
    manager._tapes = {}


def controller_aggregate(param_sets: list[dict], weights: SliceWeights) -> dict:
    """Per-coordinate weighted average sum_s Q_s * theta_s / Q, reduced in
    ascending slice order; equal weights reduce to the arithmetic mean
    exactly."""
    if len(param_sets) != len(weights.counts):
        raise ProtocolError("one parameter set per slice required")
    keys = list(param_sets[0])
    for ps in param_sets[1:]:
        if list(ps) != keys or any(
            np.shape(_np(ps[k])) != np.shape(_np(param_sets[0][k])) for k in keys
        ):
            raise ProtocolError("parameter sets are structurally different across slices")
    equal = len(set(weights.counts)) == 1
    out = {}
    for k in keys:
        if equal:
            acc = np.zeros_like(_np(param_sets[0][k]))
            for ps in param_sets:
                acc = acc + _np(ps[k])
            out[k] = acc / len(param_sets)
        else:
            acc = np.zeros_like(_np(param_sets[0][k]))
            for q, ps in zip(weights.counts, param_sets):
                acc = acc + float(q) * _np(ps[k])
            out[k] = acc / float(weights.total)
    return out


def _np(p):
    return p.data if isinstance(p, ad.Tensor) else np.asarray(p, dtype=np.float64)


def apply_global(manager: ManagerNode, global_gen: dict, global_enc: dict):
    """Replace local parameter values with the global ones; Adam moments
    are retained so the next local step continues from the averaged
    parameters with the accumulated optimizer state."""
    for k, p in manager.generator.params().items():
        if global_gen[k].shape != p.data.shape:
            raise ProtocolError(f"global/generator shape mismatch at {k}")
        p.data[...] = global_gen[k]
    for k, p in manager.encoder.params().items():
        if global_enc[k].shape != p.data.shape:
            raise ProtocolError(f"global/encoder shape mismatch at {k}")
        p.data[...] = global_enc[k]


# ---------------------------------------------------------------------------
# training driver


@dataclass
class RunResult:
    mode: str
    model_cfg: ModelConfig
    managers: dict  # key -> ManagerNode (slice id, or (slice, monitor) when standalone)
    monitors: dict  # (slice, monitor) -> MonitorNode
    global_params: dict | None
    traces: list  # per (iteration, node): d_loss, eg_loss
    ledger: CostLedger

    def bundle_for(self, slice_id, monitor_id):
        """(generator, encoder, critic) used for detection on a monitor."""
        if self.mode == "centralized":
            # one pooled model serves every monitor
            slice_id, monitor_id = 0, 0
        key = (slice_id, monitor_id) if (slice_id, monitor_id) in self.managers else slice_id
        manager = self.managers[key]
        return manager.generator, manager.encoder, self.monitors[(slice_id, monitor_id)].critic


def _slice_iteration(manager, monitors, bus, iteration, traces, ledger):
    """One pass of the split-training protocol for a single slice."""
    batches = {}
    for mon in monitors:
        x = mon.sample_batch()
        if bus is not None:
            msg = bus.send(
                wire.Message(wire.MSG_DATA_BATCH, mon.slice_id, mon.monitor_id,
                             iteration, [x]),
                link=f"monitor[{mon.slice_id}.{mon.monitor_id}]->manager[{mon.slice_id}]",
            )
            x = msg.tensors[0]
        batches[mon.monitor_id] = x

    with PhaseTimer(ledger, "manager_generate"):
        packets = manager_generate(manager, batches, iteration)
    if bus is not None:
        for mon in monitors:
            pk = packets[mon.monitor_id]
            msg = bus.send(
                wire.Message(wire.MSG_GEN_PACKET, pk.slice_id, pk.monitor_id, iteration,
                             [pk.latent_real, pk.noise, pk.fake_data]),
                link=f"manager[{pk.slice_id}]->monitor[{pk.slice_id}.{pk.monitor_id}]",
            )
            packets[mon.monitor_id] = GenPacket(
                pk.slice_id, pk.monitor_id, iteration, *msg.tensors
            )

    feedbacks = []
    d_losses, eg_losses = [], []
    with PhaseTimer(ledger, "monitor_critic"):
        for mon in monitors:
            fb, d_loss, eg = monitor_round(
                mon, batches[mon.monitor_id], packets[mon.monitor_id],
                mon.cfg.critic_iters, mon.cfg.eta,
            )
            if bus is not None:
                msg = bus.send(
                    wire.Message(wire.MSG_FEEDBACK, fb.slice_id, fb.monitor_id, iteration,
                                 [fb.encoder_feedback, fb.generator_feedback]),
                    link=f"monitor[{fb.slice_id}.{fb.monitor_id}]->manager[{fb.slice_id}]",
                )
                fb = FeedbackPacket(fb.slice_id, fb.monitor_id, iteration, *msg.tensors)
            feedbacks.append(fb)
            d_losses.append(d_loss)
            eg_losses.append(eg)

    with PhaseTimer(ledger, "manager_update"):
        manager_update(manager, feedbacks, iteration)

    traces.append({
        "iteration": iteration,
        "node": _node_label(manager, monitors),
        "d_loss": float(np.mean(d_losses)),
        "eg_loss": float(np.mean(eg_losses)),
    })


def _node_label(manager, monitors):
    if len(monitors) == 1 and manager.cfg.mode in ("standalone", "centralized"):
        mon = monitors[0]
        return f"{mon.slice_id}.{mon.monitor_id}"
    return str(manager.slice_id)


def _param_tensor_list(params):
    return [params[k].data for k in sorted(params)]


def run_training(topology: TopologySpec, cfg: TrainingConfig, model_cfg: ModelConfig,
                 shards: dict, seed: int) -> RunResult:
    """Train in the configured mode over per-monitor window shards
    (dict (slice, monitor) -> [windows, t, features])."""
    for s in range(topology.slices):
        for n in range(topology.monitors_per_slice):
            if (s, n) not in shards:
                raise ValueError(f"no shard assigned to monitor ({s}, {n})")

    ledger = CostLedger()
    traces = []
    if cfg.mode == "federated":
        result = _run_federated(topology, cfg, model_cfg, shards, seed, ledger, traces)
    elif cfg.mode == "distributed":
        result = _run_distributed(topology, cfg, model_cfg, shards, seed, ledger, traces)
    elif cfg.mode == "standalone":
        result = _run_standalone(topology, cfg, model_cfg, shards, seed, ledger, traces)
    else:
        result = _run_centralized(topology, cfg, model_cfg, shards, seed, ledger, traces)

    some_manager = next(iter(result.managers.values()))
    some_monitor = next(iter(result.monitors.values()))
    ledger.param_counts = {
        "generator": sum(p.data.size for p in some_manager.generator.params().values()),
        "encoder": sum(p.data.size for p in some_manager.encoder.params().values()),
        "critic": sum(p.data.size for p in some_monitor.critic.params().values()),
    }
    return result


def _build_slice(topology, cfg, model_cfg, shards, seed, slice_id):
    manager = ManagerNode(slice_id, model_cfg, cfg, seed)
    monitors = [
        MonitorNode(slice_id, n, shards[(slice_id, n)], model_cfg, cfg, seed)
        for n in range(topology.monitors_per_slice)
    ]
    return manager, monitors


def _run_federated(topology, cfg, model_cfg, shards, seed, ledger, traces):
    bus = Bus(ledger)
    slices = [
        _build_slice(topology, cfg, model_cfg, shards, seed, s)
        for s in range(topology.slices)
    ]
    weights = SliceWeights([
        sum(shards[(s, n)].shape[0] for n in range(topology.monitors_per_slice))
        for s in range(topology.slices)
    ])
    global_gen = {k: p.data.copy() for k, p in slices[0][0].generator.params().items()}
    global_enc = {k: p.data.copy() for k, p in slices[0][0].encoder.params().items()}

    for i in range(1, cfg.iterations + 1):
        for manager, monitors in slices:
            _slice_iteration(manager, monitors, bus, i, traces, ledger)
        if i % cfg.local_iters == 0:
            with PhaseTimer(ledger, "aggregation"):
                gen_sets, enc_sets = [], []
                for manager, _ in slices:
                    gp = manager.generator.params()
                    ep = manager.encoder.params()
                    msg = bus.send(
                        wire.Message(
                            wire.MSG_PARAMS_UP, manager.slice_id, -1, i,
                            _param_tensor_list(gp) + _param_tensor_list(ep),
                        ),
                        link=f"manager[{manager.slice_id}]->controller",
                    )
                    n_gen = len(gp)
                    gen_keys, enc_keys = sorted(gp), sorted(ep)
                    gen_sets.append(dict(zip(gen_keys, msg.tensors[:n_gen])))
                    enc_sets.append(dict(zip(enc_keys, msg.tensors[n_gen:])))
                global_gen = controller_aggregate(gen_sets, weights)
                global_enc = controller_aggregate(enc_sets, weights)
                for manager, _ in slices:
                    msg = bus.send(
                        wire.Message(
                            wire.MSG_PARAMS_DOWN, manager.slice_id, -1, i,
                            [global_gen[k] for k in sorted(global_gen)]
                            + [global_enc[k] for k in sorted(global_enc)],
                        ),
                        link=f"controller->manager[{manager.slice_id}]",
                    )
                    n_gen = len(global_gen)
                    down_gen = dict(zip(sorted(global_gen), msg.tensors[:n_gen]))
                    down_enc = dict(zip(sorted(global_enc), msg.tensors[n_gen:]))
                    apply_global(manager, down_gen, down_enc)

    return RunResult(
        mode=cfg.mode, model_cfg=model_cfg,
        managers={m.slice_id: m for m, _ in slices},
        monitors={(mon.slice_id, mon.monitor_id): mon for _, mons in slices for mon in mons},
        global_params={"generator": global_gen, "encoder": global_enc},
        traces=traces, ledger=ledger,
    )


def _run_distributed(topology, cfg, model_cfg, shards, seed, ledger, traces):
    bus = Bus(ledger)
    slices = [
        _build_slice(topology, cfg, model_cfg, shards, seed, s)
        for s in range(topology.slices)
    ]
    for i in range(1, cfg.iterations + 1):
        for manager, monitors in slices:
            _slice_iteration(manager, monitors, bus, i, traces, ledger)
    return RunResult(
        mode=cfg.mode, model_cfg=model_cfg,
        managers={m.slice_id: m for m, _ in slices},
        monitors={(mon.slice_id, mon.monitor_id): mon for _, mons in slices for mon in mons},
        global_params=None, traces=traces, ledger=ledger,
    )


def _run_standalone(topology, cfg, model_cfg, shards, seed, ledger, traces):
    # every monitor trains a private full model; no communication at all
    nodes = []
    for s in range(topology.slices):
        for n in range(topology.monitors_per_slice):
            manager = ManagerNode(s, model_cfg, cfg, seed)
            monitor = MonitorNode(s, n, shards[(s, n)], model_cfg, cfg, seed)
            nodes.append((manager, monitor))
    for i in range(1, cfg.iterations + 1):
        for manager, monitor in nodes:
            _slice_iteration(manager, [monitor], None, i, traces, ledger)
    return RunResult(
        mode=cfg.mode, model_cfg=model_cfg,
        managers={(mon.slice_id, mon.monitor_id): mgr for mgr, mon in nodes},
        monitors={(mon.slice_id, mon.monitor_id): mon for _, mon in nodes},
        global_params=None, traces=traces, ledger=ledger,
    )


def _run_centralized(topology, cfg, model_cfg, shards, seed, ledger, traces):
    # every monitor ships its whole shard up both tiers once, then one
    # model trains on the pooled data at the controller
    bus = Bus(ledger)
    pooled = []
    for s in range(topology.slices):
        for n in range(topology.monitors_per_slice):
            shard = np.asarray(shards[(s, n)], dtype=np.float64)
            bus.send(
                wire.Message(wire.MSG_DATA_BATCH, s, n, 0, [shard]),
                link=f"monitor[{s}.{n}]->manager[{s}]",
            )
            bus.send(
                wire.Message(wire.MSG_DATA_BATCH, s, -1, 0, [shard]),
                link=f"manager[{s}]->controller",
            )
            pooled.append(shard)
    pooled = np.concatenate(pooled, axis=0)
    manager = ManagerNode(0, model_cfg, cfg, seed)
    monitor = MonitorNode(0, 0, pooled, model_cfg, cfg, seed)
    for i in range(1, cfg.iterations + 1):
        _slice_iteration(manager, [monitor], None, i, traces, ledger)
    return RunResult(
        mode=cfg.mode, model_cfg=model_cfg,
        managers={(0, 0): manager}, monitors={(0, 0): monitor},
        global_params=None, traces=traces, ledger=ledger,
    )
