"""Temporal-delta forward paths for dense layers.

A dense layer applied along a sampling trajectory sees inputs a_T, …, a_1
that change slowly. Instead of quantizing each a_t whole (the direct
path), the modulated path quantizes the step-to-step difference and
accumulates the layer's linear response to it:

    modulated:  o~_t = A(Q(a_t - a_{t+1})) + o~_{t+1}
    with EC:    r    = Q(a_t - a^_{t+1})
                a^_t = a^_{t+1} + r          (carried input)
                o^_t = A(r) + o^_{t+1}       (carried output)

The EC variant quantizes the difference against the *reconstructed*
previous input, so the quantization error does not accumulate: at every
step a_t - a^_t equals that step's own quantization error and
o^_t = A(a^_t) + bias exactly. The bias enters once during warm-up and
cancels from every difference afterwards.

Op counters on the diagnostics model the deployed integer pipeline
(quantize, integer matmul, dequantize); in that accounting the EC path
costs exactly two extra tensor additions and one extra dequantization per
layer-step over the direct path, and two carried state tensors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import StateError
from .quant import QuantConfig, contraction_ratio, fake_quant
from .tensorops import Tensor, as_tensor, matmul, value_range

MODES = ("direct", "modulated", "ec")
FP_ACT_BITS = 32  # full-precision activations in the cost model


@dataclass
class LinearLayer:
    weight: np.ndarray           # (in_dim, out_dim)
    bias: np.ndarray | None = None  # (out_dim,)

    def __post_init__(self):
        self.weight = as_tensor(self.weight)
        if self.weight.ndim != 2:
            raise ValueError(f"weight must be 2-D, got {self.weight.shape}")
        if self.bias is not None:
            self.bias = as_tensor(self.bias)
            if self.bias.shape != (self.out_dim,):
                raise ValueError(
                    f"bias shape {self.bias.shape} does not match out_dim {self.out_dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def apply(self, a: Tensor) -> Tensor:
        """Full-precision forward: a @ W + bias."""
        o = matmul(a, self.weight)
        if self.bias is not None:
            o = o + self.bias
        return o

    def apply_linear(self, a: Tensor) -> Tensor:
        """Bias-free linear part; what difference tensors pass through."""
        return matmul(a, self.weight)


@dataclass
class StepDiagnostics:
    act_range: float          # range of the raw layer input a_t
    residual_range: float     # range of the tensor the quantizer saw
    quant_error_l2: float     # ||input - Q(input)||_2 for that tensor
    contraction: float        # measured ||x - Q(x)||^2 / ||x||^2 per call
    skipped: bool
    bops: int
    adds: int = 0
    quant_calls: int = 0
    dequant_calls: int = 0
    matmuls: int = 0


@dataclass
class ModulatedLayerState:
    mode: str
    cfg: QuantConfig
    weight_bits: int = 8
    a_hat: np.ndarray | None = field(default=None, repr=False)   # EC carried input
    o_hat: np.ndarray | None = field(default=None, repr=False)   # EC carried output
    a_prev: np.ndarray | None = field(default=None, repr=False)  # raw previous input (no-EC)
    o_tilde: np.ndarray | None = field(default=None, repr=False)  # carried output (no-EC)
    step_count: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


def make_state(mode: str, cfg: QuantConfig, weight_bits: int = 8) -> ModulatedLayerState:
    return ModulatedLayerState(mode=mode, cfg=cfg, weight_bits=weight_bits)


def reset(state: ModulatedLayerState) -> None:
    """Drop all carried tensors; the next call must be a warm-up."""
    state.a_hat = None
    state.o_hat = None
    state.a_prev = None
    state.o_tilde = None
    state.step_count = 0


def _act_bits(cfg: QuantConfig) -> int:
    return FP_ACT_BITS if cfg.is_identity else cfg.bits


def _bops(layer: LinearLayer, batch: int, weight_bits: int, act_bits: int) -> int:
    return batch * layer.in_dim * layer.out_dim * weight_bits * act_bits


def forward_direct(
    layer: LinearLayer, a: Tensor, cfg: QuantConfig, weight_bits: int = 8
) -> tuple[Tensor, StepDiagnostics]:
    """Quantize the whole activation, then apply the layer."""
    a = as_tensor(a)
    q = fake_quant(a, cfg)
    o = layer.apply(q)
    rng_a = value_range(a)
    identity = cfg.is_identity
    diag = StepDiagnostics(
        act_range=rng_a,
        residual_range=rng_a,  # the quantizer input is a_t itself
        quant_error_l2=float(np.linalg.norm(a - q)),
        contraction=contraction_ratio(a, q),
        skipped=False,
        bops=_bops(layer, a.shape[0], weight_bits, _act_bits(cfg)),
        adds=1 if layer.bias is not None else 0,
        quant_calls=0 if identity else 1,
        dequant_calls=0 if identity else 1,
        matmuls=1,
    )
    return o, diag


def warmup(
    state: ModulatedLayerState,
    layer: LinearLayer,
    a: Tensor,
    mode: str = "full",
    k: int = 1,
) -> tuple[Tensor, list[StepDiagnostics]]:
    """Establish the carried tensors at the first trajectory step.

    mode="full" stores the exact input and full-precision output.
    mode="repeated" applies the EC recurrence k times to the same input;
    k=1 is the plain quantized start (a^ = Q(a), o^ = A(Q(a)) + bias) and
    each further pass contracts ||a - a^|| by the measured per-call factor.
    Returns the warm-up output and one diagnostics entry per pass.
    """
    if state.step_count != 0:
        raise StateError("warm-up on a state that has already stepped; reset first")
    if mode not in ("full", "repeated"):
        raise ValueError(f"warm-up mode must be 'full' or 'repeated', got {mode!r}")
    a = as_tensor(a)
    rng_a = value_range(a)
    batch = a.shape[0]
    diags = []

    if mode == "full":
        o = layer.apply(a)
        a_cur = a.copy()
        diags.append(
            StepDiagnostics(
                act_range=rng_a,
                residual_range=rng_a,
                quant_error_l2=0.0,
                contraction=0.0,
                skipped=False,
                bops=_bops(layer, batch, state.weight_bits, FP_ACT_BITS),
                adds=1 if layer.bias is not None else 0,
                quant_calls=0,
                dequant_calls=0,
                matmuls=1,
            )
        )
    else:
        if k < 1:
            raise ValueError(f"repeated warm-up needs k >= 1, got {k}")
        if state.cfg.bits == 0:
            raise ValueError("repeated warm-up cannot run on a skip-only (0-bit) config")
        identity = state.cfg.is_identity
        a_cur = fake_quant(a, state.cfg)
        o = layer.apply(a_cur)
        diags.append(
            StepDiagnostics(
                act_range=rng_a,
                residual_range=rng_a,
                quant_error_l2=float(np.linalg.norm(a - a_cur)),
                contraction=contraction_ratio(a, a_cur),
                skipped=False,
                bops=_bops(layer, batch, state.weight_bits, _act_bits(state.cfg)),
                adds=1 if layer.bias is not None else 0,
                quant_calls=0 if identity else 1,
                dequant_calls=0 if identity else 2,  # output + stored carried input
                matmuls=1,
            )
        )
        for _ in range(k - 1):
            residual = a - a_cur
            r = fake_quant(residual, state.cfg)
            a_cur = a_cur + r
            o = o + layer.apply_linear(r)
            diags.append(
                StepDiagnostics(
                    act_range=rng_a,
                    residual_range=value_range(residual),
                    quant_error_l2=float(np.linalg.norm(residual - r)),
                    contraction=contraction_ratio(residual, r),
                    skipped=False,
                    bops=_bops(layer, batch, state.weight_bits, _act_bits(state.cfg)),
                    adds=3,
                    quant_calls=0 if identity else 1,
                    dequant_calls=0 if identity else 2,
                    matmuls=1,
                )
            )

    if state.mode == "ec":
        state.a_hat = a_cur
        state.o_hat = o
    elif state.mode == "modulated":
        # the no-EC recurrence differences against raw activations
        state.a_prev = a.copy()
        state.o_tilde = o
    else:
        raise StateError("direct mode keeps no state; warm-up does not apply")
    state.step_count = 1
    return o, diags


def _should_skip(state: ModulatedLayerState, residual_range: float) -> bool:
    return state.cfg.bits == 0 or residual_range < state.cfg.skip_threshold


def forward_modulated(
    state: ModulatedLayerState, layer: LinearLayer, a: Tensor
) -> tuple[Tensor, StepDiagnostics]:
    """No-EC step: quantize a_t - a_{t+1}, accumulate onto the carried output."""
    if state.mode != "modulated":
        raise StateError(f"forward_modulated on a {state.mode!r} state")
    if state.step_count == 0 or state.o_tilde is None:
        raise StateError("modulated step before warm-up")
    a = as_tensor(a)
    residual = a - state.a_prev
    rng_r = value_range(residual)
    batch = a.shape[0]

    if _should_skip(state, rng_r):
        o = state.o_tilde
        diag = StepDiagnostics(
            act_range=value_range(a),
            residual_range=rng_r,
            quant_error_l2=float(np.linalg.norm(residual)),
            contraction=contraction_ratio(residual, np.zeros_like(residual)),
            skipped=True,
            bops=0,
            adds=1,
        )
    else:
        q = fake_quant(residual, state.cfg)
        o = layer.apply_linear(q) + state.o_tilde
        identity = state.cfg.is_identity
        diag = StepDiagnostics(
            act_range=value_range(a),
            residual_range=rng_r,
            quant_error_l2=float(np.linalg.norm(residual - q)),
            contraction=contraction_ratio(residual, q),
            skipped=False,
            bops=_bops(layer, batch, state.weight_bits, _act_bits(state.cfg)),
            adds=2,  # residual + output accumulate
            quant_calls=0 if identity else 1,
            dequant_calls=0 if identity else 1,
            matmuls=1,
        )
        state.o_tilde = o
    state.a_prev = a.copy()  # raw cache, updated on every step
    state.step_count += 1
    return o, diag


def forward_ec(
    state: ModulatedLayerState, layer: LinearLayer, a: Tensor
) -> tuple[Tensor, StepDiagnostics]:
    """EC step: difference against the carried reconstruction a^_{t+1}."""
    if state.mode != "ec":
        raise StateError(f"forward_ec on a {state.mode!r} state")
    if state.step_count == 0 or state.o_hat is None:
        raise StateError("EC step before warm-up")
    a = as_tensor(a)
    residual = a - state.a_hat
    rng_r = value_range(residual)
    batch = a.shape[0]

    if _should_skip(state, rng_r):
        # r := 0, carried tensors unchanged
        o = state.o_hat
        diag = StepDiagnostics(
            act_range=value_range(a),
            residual_range=rng_r,
            quant_error_l2=float(np.linalg.norm(residual)),
            contraction=contraction_ratio(residual, np.zeros_like(residual)),
            skipped=True,
            bops=0,
            adds=1,
        )
    else:
        r = fake_quant(residual, state.cfg)
        o = layer.apply_linear(r) + state.o_hat
        state.a_hat = state.a_hat + r
        state.o_hat = o
        identity = state.cfg.is_identity
        diag = StepDiagnostics(
            act_range=value_range(a),
            residual_range=rng_r,
            quant_error_l2=float(np.linalg.norm(residual - r)),
            contraction=contraction_ratio(residual, r),
            skipped=False,
            bops=_bops(layer, batch, state.weight_bits, _act_bits(state.cfg)),
            adds=3,  # residual, output accumulate, carried-input update
            quant_calls=0 if identity else 1,
            dequant_calls=0 if identity else 2,  # output + residual for a^ update
            matmuls=1,
        )
    state.step_count += 1
    return o, diag
