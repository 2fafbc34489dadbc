"""Noise schedule, sampler steps, and the toy denoiser MLP.

The sampler runs the denoiser once per timestep from t=T down to t=1.
Each dense layer can be driven in one of four activation regimes:

    fp         full precision
    direct     quantize each activation whole, every step
    modulated  quantize temporal differences, no error compensation
    ec         quantize differences against the carried reconstruction

The starting noise and the per-step DDPM noise are drawn from a stream
forked off the caller's RNG, so runs that share a seed see identical
noise whatever the regime; regimes never consume random draws themselves.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .modulated import (
    LinearLayer,
    StepDiagnostics,
    forward_direct,
    forward_ec,
    forward_modulated,
    make_state,
    warmup,
)
from .quant import QuantConfig
from .rng import RngState
from .tensorops import Tensor, load_tensor, save_tensor, value_range

QUANT_MODES = ("fp", "direct", "modulated", "ec")

# geometric band of embedding frequencies, in radians per timestep; the
# top end keeps adjacent-step embeddings close (a ~1 rad/step component
# would swamp the temporal redundancy the delta paths rely on), the
# bottom end still separates early from late timesteps
EMBED_FREQ_HI = 0.03
EMBED_FREQ_LO = 5e-4


@dataclass
class DiffusionSchedule:
    timesteps: int
    beta: np.ndarray       # beta[t-1] is the step-t variance increment
    alpha_bar: np.ndarray  # running product of (1 - beta)
    sigma: np.ndarray      # per-step noise scale (zero for the ODE-style sampler)

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative product at step t, with the t=0 convention of 1."""
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])


def make_schedule(
    timesteps: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    kind: str = "ddpm",
) -> DiffusionSchedule:
    if timesteps < 1:
        raise ValueError(f"timesteps must be >= 1, got {timesteps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    if kind not in ("ddpm", "ddim"):
        raise ValueError(f"kind must be 'ddpm' or 'ddim', got {kind!r}")
    beta = np.linspace(beta_start, beta_end, timesteps)
    alpha_bar = np.empty(timesteps)
    acc = 1.0
    for i in range(timesteps):  # exact recurrence, not a float-log shortcut
        acc *= 1.0 - beta[i]
        alpha_bar[i] = acc
    sigma = np.sqrt(beta) if kind == "ddpm" else np.zeros(timesteps)
    return DiffusionSchedule(timesteps=timesteps, beta=beta, alpha_bar=alpha_bar, sigma=sigma)


def ddpm_step(x: Tensor, eps: Tensor, t: int, sched: DiffusionSchedule, z: Tensor) -> Tensor:
    """One ancestral update: posterior mean plus sigma_t * z."""
    if not 1 <= t <= sched.timesteps:
        raise ValueError(f"t must be in 1..{sched.timesteps}, got {t}")
    b = float(sched.beta[t - 1])
    ab = float(sched.alpha_bar[t - 1])
    mean = (x - b / np.sqrt(1.0 - ab) * eps) / np.sqrt(1.0 - b)
    return mean + float(sched.sigma[t - 1]) * z


def ddim_step(x: Tensor, eps: Tensor, t: int, sched: DiffusionSchedule) -> Tensor:
    """Deterministic update through the predicted clean point."""
    if not 1 <= t <= sched.timesteps:
        raise ValueError(f"t must be in 1..{sched.timesteps}, got {t}")
    ab_t = sched.alpha_bar_at(t)
    ab_prev = sched.alpha_bar_at(t - 1)
    x0 = (x - np.sqrt(1.0 - ab_t) * eps) / np.sqrt(ab_t)
    return np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps


def time_embedding(t, width: int) -> np.ndarray:
    """Sinusoidal features of the timestep; smooth in t by construction."""
    if width == 0:
        t_arr = np.asarray(t, dtype=np.float64)
        return np.zeros(t_arr.shape + (0,))
    if width < 0 or width % 2:
        raise ValueError(f"embedding width must be even and >= 0, got {width}")
    half = width // 2
    if half == 1:
        freqs = np.array([EMBED_FREQ_HI])
    else:
        freqs = np.geomspace(EMBED_FREQ_HI, EMBED_FREQ_LO, half)
    args = np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


@dataclass
class DenoiserNetwork:
    layers: list[LinearLayer]
    activation: str = "silu"
    time_embed: int = 16

    def __post_init__(self):
        if not self.layers:
            raise ValueError("denoiser needs at least one layer")
        if self.activation not in ("relu", "silu"):
            raise ValueError(f"activation must be 'relu' or 'silu', got {self.activation!r}")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(
                    f"layer dims do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )
        if self.layers[0].in_dim <= self.time_embed:
            raise ValueError("first layer must be wider than the time embedding")

    @property
    def data_dim(self) -> int:
        return self.layers[0].in_dim - self.time_embed

    def input_features(self, x: Tensor, t) -> Tensor:
        """Concatenate data coordinates with the (broadcast) time embedding."""
        emb = time_embedding(t, self.time_embed)
        if emb.ndim == 1:
            emb = np.broadcast_to(emb, (x.shape[0], self.time_embed))
        return np.concatenate([x, emb], axis=1)

    def forward(self, x: Tensor, t) -> Tensor:
        """Full-precision noise prediction."""
        a = self.input_features(x, t)
        for i, layer in enumerate(self.layers):
            a = layer.apply(a)
            if i < len(self.layers) - 1:
                a = apply_activation(a, self.activation)
        return a


def apply_activation(z: Tensor, name: str) -> Tensor:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "silu":
        return z * _sigmoid(z)
    raise ValueError(f"unknown activation {name!r}")


def activation_grad(z: Tensor, name: str) -> Tensor:
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "silu":
        s = _sigmoid(z)
        return s * (1.0 + z * (1.0 - s))
    raise ValueError(f"unknown activation {name!r}")


def _sigmoid(z: Tensor) -> Tensor:
    # tanh form is stable for large |z|
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def make_denoiser(
    rng: RngState,
    data_dim: int = 2,
    hidden: tuple[int, ...] = (128, 128),
    time_embed: int = 16,
    activation: str = "silu",
) -> DenoiserNetwork:
    """Fresh MLP with 1/sqrt(fan_in)-scaled normal weights, zero biases."""
    dims = [data_dim + time_embed, *hidden, data_dim]
    layers = []
    for din, dout in zip(dims, dims[1:]):
        w = rng.normal(size=(din, dout)) / np.sqrt(din)
        layers.append(LinearLayer(weight=w, bias=np.zeros(dout)))
    return DenoiserNetwork(layers=layers, activation=activation, time_embed=time_embed)


# --- trajectories -------------------------------------------------------


@dataclass
class SampleTrajectory:
    mode: str
    bits: int | None
    sampler: str
    seed: int
    states: list[np.ndarray]                 # x_T, ..., x_0 (length T+1)
    layer_inputs: list[list[np.ndarray]] = field(repr=False, default_factory=list)
    layer_outputs: list[list[np.ndarray]] = field(repr=False, default_factory=list)
    diags: list[list[StepDiagnostics]] = field(default_factory=list)

    @property
    def num_steps(self) -> int:
        return len(self.layer_inputs)

    @property
    def num_layers(self) -> int:
        return len(self.layer_inputs[0]) if self.layer_inputs else 0

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


def _fp_diag(layer: LinearLayer, a: Tensor, weight_bits: int) -> StepDiagnostics:
    rng_a = value_range(a)
    return StepDiagnostics(
        act_range=rng_a,
        residual_range=rng_a,
        quant_error_l2=0.0,
        contraction=0.0,
        skipped=False,
        bops=a.shape[0] * layer.in_dim * layer.out_dim * weight_bits * 32,
        adds=1 if layer.bias is not None else 0,
        matmuls=1,
    )


def sample(
    net: DenoiserNetwork,
    sched: DiffusionSchedule,
    sampler: str = "ddpm",
    quant_mode: str = "fp",
    cfg: QuantConfig | None = None,
    n: int = 16,
    rng: RngState | None = None,
    warmup_mode: str = "full",
    warmup_k: int = 1,
    weight_bits: int = 8,
) -> SampleTrajectory:
    """Run a full trajectory, recording per-layer tensors and diagnostics."""
    if sampler not in ("ddpm", "ddim"):
        raise ValueError(f"sampler must be 'ddpm' or 'ddim', got {sampler!r}")
    if quant_mode not in QUANT_MODES:
        raise ValueError(f"quant_mode must be one of {QUANT_MODES}, got {quant_mode!r}")
    if rng is None:
        raise ValueError("sample() needs an explicit RngState")
    if quant_mode in ("direct", "modulated", "ec") and cfg is None:
        raise ValueError(f"quant_mode {quant_mode!r} needs a QuantConfig")

    noise = rng.fork(0)
    x = noise.normal(size=(n, net.data_dim))
    states = None
    if quant_mode in ("modulated", "ec"):
        states = [make_state(quant_mode, cfg, weight_bits) for _ in net.layers]

    traj = SampleTrajectory(
        mode=quant_mode,
        bits=None if cfg is None else cfg.bits,
        sampler=sampler,
        seed=rng.seed,
        states=[x.copy()],
    )

    for t in range(sched.timesteps, 0, -1):
        a = net.input_features(x, t)
        ins, outs, dgs = [], [], []
        for i, layer in enumerate(net.layers):
            ins.append(a)
            if quant_mode == "fp":
                o = layer.apply(a)
                diag = _fp_diag(layer, a, weight_bits)
            elif quant_mode == "direct":
                o, diag = forward_direct(layer, a, cfg, weight_bits)
            else:
                st = states[i]
                if st.step_count == 0:
                    o, wdiags = warmup(st, layer, a, mode=warmup_mode, k=warmup_k)
                    diag = wdiags[-1]
                elif quant_mode == "modulated":
                    o, diag = forward_modulated(st, layer, a)
                else:
                    o, diag = forward_ec(st, layer, a)
            outs.append(o)
            dgs.append(diag)
            if i < len(net.layers) - 1:
                a = apply_activation(o, net.activation)
        eps = outs[-1]
        traj.layer_inputs.append(ins)
        traj.layer_outputs.append(outs)
        traj.diags.append(dgs)

        if sampler == "ddpm":
            z = noise.normal(size=x.shape) if t > 1 else np.zeros_like(x)
            x = ddpm_step(x, eps, t, sched, z)
        else:
            x = ddim_step(x, eps, t, sched)
        traj.states.append(x.copy())
    return traj


# --- weight bundles -----------------------------------------------------


def save_denoiser(path, net: DenoiserNetwork) -> None:
    """Write a directory with a JSON manifest plus one binary file per tensor."""
    os.makedirs(path, exist_ok=True)
    manifest = {
        "format": "modiff-denoiser",
        "version": 1,
        "activation": net.activation,
        "time_embed": net.time_embed,
        "data_dim": net.data_dim,
        "layers": [
            {"in": ly.in_dim, "out": ly.out_dim, "bias": ly.bias is not None}
            for ly in net.layers
        ],
    }
    for i, ly in enumerate(net.layers):
        save_tensor(os.path.join(path, f"w{i}.mdtn"), ly.weight)
        if ly.bias is not None:
            save_tensor(os.path.join(path, f"b{i}.mdtn"), ly.bias)
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8", newline="\n") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_denoiser(path) -> DenoiserNetwork:
    manifest_path = os.path.join(path, "manifest.json")
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"no manifest at {manifest_path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"bad manifest JSON at {manifest_path}: {e}")
    if manifest.get("format") != "modiff-denoiser":
        raise ConfigError(f"unrecognized bundle format in {manifest_path}")
    layers = []
    for i, spec in enumerate(manifest["layers"]):
        w = load_tensor(os.path.join(path, f"w{i}.mdtn"))
        if w.shape != (spec["in"], spec["out"]):
            raise ConfigError(
                f"layer {i} weight shape {w.shape} does not match manifest "
                f"({spec['in']}, {spec['out']})"
            )
        b = load_tensor(os.path.join(path, f"b{i}.mdtn")) if spec["bias"] else None
        layers.append(LinearLayer(weight=w, bias=b))
    return DenoiserNetwork(
        layers=layers,
        activation=manifest["activation"],
        time_embed=manifest["time_embed"],
    )
