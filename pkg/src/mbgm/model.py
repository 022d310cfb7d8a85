"""The motion-based dynamic pattern generator.

Four networks compose the generator.  A small residual MLP advances the state
``s_t = tanh(s_{t-1} + mlp(s_{t-1}, h_t))`` driven by white-noise vectors
``h_t``.  The motion half of the state feeds a transposed-convolution ladder
emitting a per-pixel displacement field, the residual half feeds a twin ladder
emitting a residual image, and an appearance ladder maps a latent vector to
the initial frame.  Each frame's mean is the previous trackable frame warped
by the displacement field plus the residual image.

The penalized log joint scores a latent path against an observed video:

    L = -1/2 [ ||latents||^2 + ||video - mean_frames||^2 / sigma^2 ]
        - lambda1 * sum_t ||R_t||^2  -  lambda2 * sum_t ||grad M_t||^2

where the flow roughness term sums squared first-order spatial differences.
Both Langevin inference (gradients w.r.t. latents) and parameter updates
(gradients w.r.t. weights) differentiate this single objective.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, RunningStats
from .kernels import bilinear_fwd, sample_grid
from .rng import RandomStream


class ConfigError(ValueError):
    """A configuration value or combination is invalid."""


@dataclass
class ModelConfig:
    """Architecture and objective hyperparameters.

    ``emission_channels`` lists the hidden channel widths of the deconvolution
    ladders; the output layer's channel count (2 for flow, image channels for
    residual/appearance) is appended per ladder.  The ladder is: one 1x1->4x4
    seed layer, stride-2 doublings up to ``image_size``, then size-preserving
    layers, all with 4x4 kernels.
    """

    image_size: int = 64
    channels: int = 3
    T: int = 29
    state_dim: int = 80
    motion_state_dim: int = 50
    residual_state_dim: int = 30
    noise_dim: int = 100
    appearance_dim: int = 10
    emission_channels: list[int] = field(default_factory=lambda: [512, 512, 256, 128, 64])
    transition_hidden: list[int] = field(default_factory=lambda: [20, 20])
    flow_scale: float = 10.0
    sigma: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 0.005
    seq_motion_dim: int = 0
    seq_residual_dim: int = 0
    trackable_only: bool = False
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.9

    @property
    def seq_dim(self) -> int:
        return self.seq_motion_dim + self.seq_residual_dim

    def validate(self) -> "ModelConfig":
        if self.motion_state_dim + self.residual_state_dim != self.state_dim:
            raise ConfigError(
                f"motion_state_dim + residual_state_dim must equal state_dim: "
                f"{self.motion_state_dim} + {self.residual_state_dim} != {self.state_dim}")
        for key in ("image_size", "channels", "T", "state_dim", "motion_state_dim",
                    "noise_dim", "appearance_dim"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.residual_state_dim < 0 or self.seq_motion_dim < 0 or self.seq_residual_dim < 0:
            raise ConfigError("state and sequence-vector dims must be >= 0")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be > 0, got {self.sigma}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError(f"lambda1/lambda2 must be >= 0, got {self.lambda1}/{self.lambda2}")
        if self.flow_scale <= 0:
            raise ConfigError(f"flow_scale must be > 0, got {self.flow_scale}")
        if self.bn_epsilon <= 0 or not (0.0 <= self.bn_momentum < 1.0):
            raise ConfigError("bn_epsilon must be > 0 and bn_momentum in [0, 1)")
        if not self.emission_channels or any(c < 1 for c in self.emission_channels):
            raise ConfigError(f"emission_channels must be non-empty positive, got {self.emission_channels}")
        if any(w < 1 for w in self.transition_hidden):
            raise ConfigError(f"transition_hidden widths must be >= 1, got {self.transition_hidden}")
        ladder_plan(self)
        return self


def ladder_plan(config: ModelConfig) -> list[tuple[int, tuple[int, int, int, int]]]:
    """Per-layer ``(stride, crop)`` of the emission ladder.

    Layer count equals ``len(emission_channels) + 1``; the seed layer and the
    stride-2 doublings are fixed by ``image_size``, remaining layers preserve
    size (kernel 4, stride 1, crop (1, 2, 1, 2), the "same"-output crop).
    """
    size = config.image_size
    doublings = int(round(math.log2(size / 4))) if size >= 4 else -1
    if doublings < 0 or 4 * 2 ** doublings != size:
        raise ConfigError(f"image_size must be 4 * 2^k for integer k >= 0, got {size}")
    n_layers = len(config.emission_channels) + 1
    same_count = n_layers - 1 - doublings
    if same_count < 1:
        raise ConfigError(
            f"emission ladder with {len(config.emission_channels)} hidden channels cannot reach "
            f"{size}x{size}: needs {doublings} stride-2 layers plus seed and output layers")
    plan = [(1, (0, 0, 0, 0))]
    plan += [(2, (1, 1, 1, 1))] * doublings
    plan += [(1, (1, 2, 1, 2))] * same_count
    return plan


_LADDER_SEEDS = {
    "f0": lambda cfg: (cfg.appearance_dim, cfg.channels),
    "f2": lambda cfg: (cfg.motion_state_dim + cfg.seq_motion_dim, 2),
    "f3": lambda cfg: (cfg.residual_state_dim + cfg.seq_residual_dim, cfg.channels),
}


@dataclass
class ModelParams:
    """All named parameter tensors plus batch-norm running statistics.

    Name enumeration order is fixed at creation and is the serialization
    contract for checkpoints.
    """

    tensors: dict[str, np.ndarray]
    running: dict[str, RunningStats]
    dtype: np.dtype

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: v.copy() for k, v in self.tensors.items()},
            {k: RunningStats(rs.mean.copy(), rs.var.copy()) for k, rs in self.running.items()},
            self.dtype,
        )

    def astype(self, dtype) -> "ModelParams":
        dtype = np.dtype(dtype)
        return ModelParams(
            {k: v.astype(dtype) for k, v in self.tensors.items()},
            {k: RunningStats(rs.mean.astype(dtype), rs.var.astype(dtype)) for k, rs in self.running.items()},
            dtype,
        )


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Fresh parameters: Gaussian(0, 0.02) weights, zero biases, unit BN."""
    config.validate()
    dtype = np.dtype(dtype)
    rng = RandomStream(seed)
    tensors: dict[str, np.ndarray] = {}
    running: dict[str, RunningStats] = {}

    def weight(name, shape):
        tensors[name] = (rng.normal(shape) * 0.02).astype(dtype)

    def ladder(net):
        seed_dim, out_ch = _LADDER_SEEDS[net](config)
        chans = list(config.emission_channels) + [out_ch]
        prev = seed_dim
        plan = ladder_plan(config)
        for i in range(len(plan)):
            weight(f"{net}.l{i}.kernel", (4, 4, prev, chans[i]))
            if i == len(plan) - 1:
                tensors[f"{net}.l{i}.bias"] = np.zeros(chans[i], dtype=dtype)
            else:
                tensors[f"{net}.l{i}.bn.gamma"] = np.ones(chans[i], dtype=dtype)
                tensors[f"{net}.l{i}.bn.beta"] = np.zeros(chans[i], dtype=dtype)
                running[f"{net}.l{i}.bn"] = RunningStats(
                    np.zeros(chans[i], dtype=dtype), np.ones(chans[i], dtype=dtype))
            prev = chans[i]

    ladder("f0")

    in_dim = config.state_dim + config.noise_dim + config.seq_dim
    widths = list(config.transition_hidden)
    prev = in_dim
    for i, w in enumerate(widths):
        weight(f"f1.l{i}.weight", (prev, w))
        tensors[f"f1.l{i}.bias"] = np.zeros(w, dtype=dtype)
        prev = w
    weight("f1.out.weight", (prev, config.state_dim))
    tensors["f1.out.bias"] = np.zeros(config.state_dim, dtype=dtype)

    ladder("f2")
    if not config.trackable_only:
        ladder("f3")

    return ModelParams(tensors, running, dtype)


@dataclass
class LatentPath:
    """Every latent of one video: appearance ``c``, initial state ``s0``,
    noise column ``h`` of shape ``(T, noise_dim)`` and the optional
    sequence-specific vector ``a``."""

    c: np.ndarray
    s0: np.ndarray
    h: np.ndarray
    a: np.ndarray | None = None

    def components(self):
        yield "c", self.c
        yield "s0", self.s0
        yield "h", self.h
        if self.a is not None:
            yield "a", self.a

    def copy(self) -> "LatentPath":
        return LatentPath(self.c.copy(), self.s0.copy(), self.h.copy(),
                          None if self.a is None else self.a.copy())

    def size(self) -> int:
        return sum(v.size for _, v in self.components())

    @classmethod
    def zeros(cls, config: ModelConfig, T: int, dtype=np.float32) -> "LatentPath":
        a = np.zeros(config.seq_dim, dtype=dtype) if config.seq_dim > 0 else None
        return cls(np.zeros(config.appearance_dim, dtype=dtype),
                   np.zeros(config.state_dim, dtype=dtype),
                   np.zeros((T, config.noise_dim), dtype=dtype), a)

    @classmethod
    def sample(cls, rng: RandomStream, config: ModelConfig, T: int, dtype=np.float32) -> "LatentPath":
        """Draw from the standard-normal prior (fixed component order)."""
        c = rng.normal(config.appearance_dim, dtype)
        s0 = rng.normal(config.state_dim, dtype)
        h = rng.normal((T, config.noise_dim), dtype)
        a = rng.normal(config.seq_dim, dtype) if config.seq_dim > 0 else None
        return cls(c, s0, h, a)


@dataclass
class DecompositionTrace:
    """Noise-free unroll outputs: states ``s_1..s_T``, flows ``M_1..M_T`` in
    pixels, residuals ``R_0..R_T``, trackables ``I_0..I_T`` and mean frames
    ``I_t + R_t``."""

    states: np.ndarray
    flows: np.ndarray
    residuals: np.ndarray
    trackables: np.ndarray
    frames: np.ndarray


def _transition(nodes, s_prev, h_t, a_node, config):
    parts = [s_prev, h_t]
    if a_node is not None:
        parts.append(a_node)
    x = ad.concat(parts, axis=0)
    for i in range(len(config.transition_hidden)):
        x = ad.relu(ad.add(ad.matmul(x, nodes[f"f1.l{i}.weight"]), nodes[f"f1.l{i}.bias"]))
    r = ad.add(ad.matmul(x, nodes["f1.out.weight"]), nodes["f1.out.bias"])
    return ad.tanh(ad.add(s_prev, r))


def _ladder_forward(net, seed, nodes, config, bn_mode, running):
    x = seed
    plan = ladder_plan(config)
    for i, (stride, crop) in enumerate(plan):
        if i == len(plan) - 1:
            x = ad.conv_transpose2d(x, nodes[f"{net}.l{i}.kernel"], stride, crop,
                                    bias=nodes[f"{net}.l{i}.bias"])
            x = ad.tanh(x)
        else:
            x = ad.conv_transpose2d(x, nodes[f"{net}.l{i}.kernel"], stride, crop)
            x = ad.batch_norm(x, nodes[f"{net}.l{i}.bn.gamma"], nodes[f"{net}.l{i}.bn.beta"],
                              bn_mode, running[f"{net}.l{i}.bn"],
                              config.bn_epsilon, config.bn_momentum)
            x = ad.relu(x)
    return x


def _build_unroll(g: Graph, lat: dict, nodes: dict, config: ModelConfig, T: int,
                  bn_mode: str, running: dict):
    size, C = config.image_size, config.channels
    dM, dR = config.motion_state_dim, config.residual_state_dim

    a_node = lat.get("a")
    aM = aR = None
    if a_node is not None:
        if config.seq_motion_dim > 0:
            aM = ad.subtensor(a_node, (slice(0, config.seq_motion_dim),))
        if config.seq_residual_dim > 0:
            aR = ad.subtensor(a_node, (slice(config.seq_motion_dim, config.seq_dim),))

    c_seed = ad.reshape(lat["c"], (1, 1, 1, config.appearance_dim))
    I0 = ad.reshape(_ladder_forward("f0", c_seed, nodes, config, bn_mode, running), (size, size, C))

    states = []
    s_prev = lat["s0"]
    for t in range(T):
        h_t = ad.subtensor(lat["h"], (t,))
        s_prev = _transition(nodes, s_prev, h_t, a_node, config)
        states.append(s_prev)
    s_stack = ad.stack0(states)

    def with_seq(seed_node, seq_part, dim):
        if seq_part is None:
            return seed_node
        b = seed_node.shape[0]
        tile = ad.broadcast_to(ad.reshape(seq_part, (1, 1, 1, dim)), (b, 1, 1, dim))
        return ad.concat([seed_node, tile], axis=3)

    seed_m = ad.reshape(ad.subtensor(s_stack, (slice(None), slice(0, dM))), (T, 1, 1, dM))
    seed_m = with_seq(seed_m, aM, config.seq_motion_dim)
    flows = ad.scale(_ladder_forward("f2", seed_m, nodes, config, bn_mode, running),
                     config.flow_scale)

    if config.trackable_only:
        residuals = g.constant(np.zeros((T + 1, size, size, C), dtype=g.dtype))
    else:
        s0_r = ad.reshape(ad.subtensor(lat["s0"], (slice(dM, dM + dR),)), (1, dR))
        s_r = ad.concat([s0_r, ad.subtensor(s_stack, (slice(None), slice(dM, dM + dR)))], axis=0)
        seed_r = with_seq(ad.reshape(s_r, (T + 1, 1, 1, dR)), aR, config.seq_residual_dim)
        residuals = _ladder_forward("f3", seed_r, nodes, config, bn_mode, running)

    grid = g.constant(sample_grid(size, size, g.dtype))
    trackables = [I0]
    for t in range(T):
        coords = ad.add(grid, ad.subtensor(flows, (t,)))
        trackables.append(ad.bilinear_sample(trackables[-1], coords))
    i_stack = ad.stack0(trackables)
    frames = ad.add(i_stack, residuals)

    return {"states": s_stack, "flows": flows, "residuals": residuals,
            "trackables": i_stack, "frames": frames}


def _build_objective(g, lat, nodes, config, video, T, bn_mode, running):
    un = _build_unroll(g, lat, nodes, config, T, bn_mode, running)
    obs = g.constant(video)
    recon = ad.sum_of_squares(ad.sub(obs, un["frames"]))

    lat_sq = None
    for name in ("c", "s0", "h", "a"):
        node = lat.get(name)
        if node is None:
            continue
        term = ad.sum_of_squares(node)
        lat_sq = term if lat_sq is None else ad.add(lat_sq, term)

    pen_r = ad.sum_of_squares(un["residuals"])
    flows = un["flows"]
    diff_x = ad.sub(ad.subtensor(flows, (slice(None), slice(None), slice(1, None))),
                    ad.subtensor(flows, (slice(None), slice(None), slice(0, -1))))
    diff_y = ad.sub(ad.subtensor(flows, (slice(None), slice(1, None))),
                    ad.subtensor(flows, (slice(None), slice(0, -1))))
    pen_m = ad.add(ad.sum_of_squares(diff_x), ad.sum_of_squares(diff_y))

    total = ad.add(ad.scale(lat_sq, -0.5), ad.scale(recon, -0.5 / config.sigma ** 2))
    if config.lambda1 != 0.0:
        total = ad.add(total, ad.scale(pen_r, -config.lambda1))
    if config.lambda2 != 0.0:
        total = ad.add(total, ad.scale(pen_m, -config.lambda2))

    parts = {"latent_sq": float(lat_sq.value), "recon_sq": float(recon.value),
             "penalty_r": float(pen_r.value), "penalty_m": float(pen_m.value)}
    return total, un, parts


def _trace_from(un) -> DecompositionTrace:
    return DecompositionTrace(
        states=un["states"].value.copy(),
        flows=un["flows"].value.copy(),
        residuals=un["residuals"].value.copy(),
        trackables=un["trackables"].value.copy(),
        frames=un["frames"].value.copy(),
    )


def _latent_nodes(g, latents: LatentPath, trainable: bool) -> dict:
    make = g.leaf if trainable else g.constant
    out = {"c": make(latents.c, "c"), "s0": make(latents.s0, "s0"), "h": make(latents.h, "h")}
    if latents.a is not None:
        out["a"] = make(latents.a, "a")
    return out


def _param_nodes(g, params: ModelParams, trainable: bool) -> dict:
    make = g.leaf if trainable else g.constant
    return {name: make(arr, name) for name, arr in params.tensors.items()}


def _check_video(video, latents, config):
    expect = (latents.h.shape[0] + 1, config.image_size, config.image_size, config.channels)
    if video.shape != expect:
        raise ConfigError(f"video shape {video.shape} does not match expected {expect} "
                          f"(T+1, image_size, image_size, channels)")


def penalized_log_joint(video: np.ndarray, latents: LatentPath, params: ModelParams,
                        config: ModelConfig, bn_mode: str = "train", wrt: str | None = None,
                        update_running: bool = True):
    """Objective value, decomposition trace, and optionally gradients.

    ``wrt`` is ``None`` (value only), ``"latents"`` or ``"params"``.  With
    ``update_running=False`` train-mode batch statistics are still used but
    the stored running statistics are left untouched (read-only evaluation).
    """
    video = np.ascontiguousarray(video, dtype=params.dtype)
    _check_video(video, latents, config)
    T = latents.h.shape[0]

    running = params.running
    if bn_mode == "train" and not update_running:
        running = {k: RunningStats(rs.mean.copy(), rs.var.copy()) for k, rs in running.items()}

    g = Graph(params.dtype)
    lat = _latent_nodes(g, latents, wrt == "latents")
    nodes = _param_nodes(g, params, wrt == "params")
    total, un, parts = _build_objective(g, lat, nodes, config, video, T, bn_mode, running)
    value = float(total.value)
    trace = _trace_from(un)

    if wrt is None:
        return value, trace, parts
    gm = g.backward(total)
    if wrt == "latents":
        grads = {name: gm[node] for name, node in lat.items()}
    elif wrt == "params":
        grads = {name: gm[node] for name, node in nodes.items()}
    else:
        raise ValueError(f"wrt must be None, 'latents' or 'params', got {wrt!r}")
    return value, trace, parts, grads


def unroll(latents: LatentPath, params: ModelParams, config: ModelConfig,
           bn_mode: str = "infer", update_running: bool = False) -> DecompositionTrace:
    """Noise-free unroll of the generator at the given latents."""
    T = latents.h.shape[0]
    running = params.running
    if bn_mode == "train" and not update_running:
        running = {k: RunningStats(rs.mean.copy(), rs.var.copy()) for k, rs in running.items()}
    g = Graph(params.dtype)
    lat = _latent_nodes(g, latents, False)
    nodes = _param_nodes(g, params, False)
    un = _build_unroll(g, lat, nodes, config, T, bn_mode, running)
    return _trace_from(un)


def transition_step(s_prev: np.ndarray, h_t: np.ndarray, params: ModelParams,
                    config: ModelConfig, a: np.ndarray | None = None) -> np.ndarray:
    """One state transition ``s_t = tanh(s_prev + mlp(s_prev, h_t, a))``."""
    g = Graph(params.dtype)
    nodes = _param_nodes(g, params, False)
    a_node = g.constant(a) if a is not None else None
    out = _transition(nodes, g.constant(s_prev), g.constant(h_t), a_node, config)
    return out.value


def _emit(net, state, params, config, seq_part, bn_mode, out_scale):
    g = Graph(params.dtype)
    nodes = _param_nodes(g, params, False)
    running = {k: RunningStats(rs.mean.copy(), rs.var.copy()) for k, rs in params.running.items()}
    dim = state.shape[0]
    seed = ad.reshape(g.constant(state), (1, 1, 1, dim))
    if seq_part is not None:
        seed = ad.concat([seed, ad.reshape(g.constant(seq_part), (1, 1, 1, seq_part.shape[0]))], axis=3)
    out = _ladder_forward(net, seed, nodes, config, bn_mode, running)
    if out_scale != 1.0:
        out = ad.scale(out, out_scale)
    return out.value[0]


def emit_flow(s_m: np.ndarray, params: ModelParams, config: ModelConfig,
              a_m: np.ndarray | None = None, bn_mode: str = "infer") -> np.ndarray:
    """Displacement field (H, W, 2) in pixels for one motion state."""
    return _emit("f2", s_m, params, config, a_m, bn_mode, config.flow_scale)


def emit_residual(s_r: np.ndarray, params: ModelParams, config: ModelConfig,
                  a_r: np.ndarray | None = None, bn_mode: str = "infer") -> np.ndarray:
    """Residual image (H, W, C) for one residual state; exact zeros when the
    configuration is trackable-only."""
    if config.trackable_only:
        return np.zeros((config.image_size, config.image_size, config.channels), dtype=params.dtype)
    return _emit("f3", s_r, params, config, a_r, bn_mode, 1.0)


def generate_appearance(c: np.ndarray, params: ModelParams, config: ModelConfig,
                        bn_mode: str = "infer") -> np.ndarray:
    """Initial trackable frame from an appearance vector."""
    return _emit("f0", c, params, config, None, bn_mode, 1.0)


def warp(image: np.ndarray, flow: np.ndarray) -> np.ndarray:
    """Backward-warp: ``out(p) = image(p + flow(p))`` with border clamp."""
    if image.shape[:2] != flow.shape[:2] or flow.shape[-1] != 2:
        raise ad.ShapeError(f"warp: image {image.shape} and flow {flow.shape} do not conform")
    grid = sample_grid(image.shape[0], image.shape[1], image.dtype)
    out, _ = bilinear_fwd(image, grid + flow.astype(image.dtype, copy=False))
    return out


def toy_config() -> ModelConfig:
    """Small double-precision-friendly configuration for gradient checking."""
    return ModelConfig(
        image_size=8, channels=3, T=3,
        state_dim=8, motion_state_dim=5, residual_state_dim=3,
        noise_dim=6, appearance_dim=4,
        emission_channels=[8, 8, 4], transition_hidden=[4, 4],
    ).validate()


def gradient_check_report(config: ModelConfig | None = None, seed: int = 7,
                          eps: float = 1e-5) -> dict[str, float]:
    """Max relative error of analytic vs central-difference gradients.

    Covers every latent component and every parameter tensor of a toy model
    in double precision.  Keys are tensor names plus ``"max"``.
    """
    config = (config or toy_config()).validate()
    params = init_params(config, seed, dtype=np.float64)
    rng = RandomStream(seed).derive(1)
    T = config.T
    latents = LatentPath.sample(rng, config, T, np.float64)
    video = np.tanh(rng.normal((T + 1, config.image_size, config.image_size, config.channels))) * 0.8

    def value_at(lat, par):
        v, _, _ = penalized_log_joint(video, lat, par, config, bn_mode="train",
                                      wrt=None, update_running=False)
        return v

    report: dict[str, float] = {}

    _, _, _, lat_grads = penalized_log_joint(video, latents, params, config,
                                             bn_mode="train", wrt="latents", update_running=False)
    for name, arr in latents.components():
        def f(x, _name=name):
            lat = latents.copy()
            setattr(lat, _name, x)
            return value_at(lat, params)
        report[f"latent.{name}"] = ad.finite_diff_check(f, arr, lat_grads[name], eps)

    _, _, _, par_grads = penalized_log_joint(video, latents, params, config,
                                             bn_mode="train", wrt="params", update_running=False)
    for name in params.names():
        def f(x, _name=name):
            par = ModelParams(dict(params.tensors), params.running, params.dtype)
            par.tensors[_name] = x
            return value_at(latents, par)
        report[name] = ad.finite_diff_check(f, params.tensors[name], par_grads[name], eps)

    report["max"] = max(report.values())
    return report
