"""Measurements over recorded trajectories.

Drift curves against a full-precision reference, activation-range
statistics and their temporal differences, the stale-activation reuse
baseline, operation/memory accounting, and CSV emission. Everything here
is pure aggregation — nothing mutates a trajectory.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .diffusion import (
    DenoiserNetwork,
    DiffusionSchedule,
    SampleTrajectory,
    _fp_diag,
    apply_activation,
    ddim_step,
    ddpm_step,
)
from .errors import ShapeError
from .modulated import ModulatedLayerState, StepDiagnostics
from .rng import RngState
from .tensorops import relative_l2, value_range

MODE_ORDER = ("fp", "direct", "modulated", "ec", "cache")

CSV_COLUMNS = (
    "seed", "mode", "b_w", "b_a", "step", "layer",
    "drift", "act_range", "diff_range", "quant_err", "skipped", "bops",
)


# --- binary-operation accounting ----------------------------------------


@dataclass(frozen=True)
class BopsModel:
    """Cost model: multiply-accumulate counts times operand bit-widths.

    act_bits None means full-precision activations, counted at 32 bits.
    Quantize/dequantize calls are tracked separately (see op_totals) and
    deliberately excluded here: the matrix multiplies dominate.
    """

    macs_per_layer: tuple
    weight_bits: int = 8
    act_bits: int | None = None

    def __post_init__(self):
        if not self.macs_per_layer:
            raise ValueError("need at least one layer")
        if any(int(m) != m or m < 1 for m in self.macs_per_layer):
            raise ValueError(f"macs must be positive integers: {self.macs_per_layer}")
        if self.weight_bits < 1:
            raise ValueError(f"weight_bits must be >= 1, got {self.weight_bits}")
        if self.act_bits is not None and self.act_bits < 1:
            raise ValueError(f"act_bits must be >= 1 or None, got {self.act_bits}")


def macs_for_net(net: DenoiserNetwork, batch: int = 1) -> tuple:
    """Per-layer multiply-accumulate counts for a dense forward pass."""
    return tuple(batch * ly.in_dim * ly.out_dim for ly in net.layers)


def bops_count(model: BopsModel) -> int:
    """Total binary operations: sum over layers of macs * b_w * b_a."""
    b_a = 32 if model.act_bits is None else model.act_bits
    return sum(int(m) * model.weight_bits * b_a for m in model.macs_per_layer)


# --- drift against a reference run --------------------------------------


def _check_comparable(fp_traj: SampleTrajectory, q_traj: SampleTrajectory):
    if fp_traj.num_steps != q_traj.num_steps:
        raise ShapeError(
            f"trajectory lengths differ: {fp_traj.num_steps} vs {q_traj.num_steps}"
        )
    if fp_traj.num_layers != q_traj.num_layers:
        raise ShapeError(
            f"layer counts differ: {fp_traj.num_layers} vs {q_traj.num_layers}"
        )


def feature_drift(
    fp_traj: SampleTrajectory,
    q_traj: SampleTrajectory,
    layer: int | None = None,
    on: str = "output",
) -> np.ndarray:
    """Per-step relative l2 distance of one layer's tensors between runs.

    layer None selects the middle layer; `on` picks the layer's input or
    output stream. Entry k corresponds to sampling step k (timestep T-k).
    """
    _check_comparable(fp_traj, q_traj)
    if on not in ("input", "output"):
        raise ValueError(f"on must be 'input' or 'output', got {on!r}")
    if layer is None:
        layer = q_traj.num_layers // 2
    if not 0 <= layer < q_traj.num_layers:
        raise ValueError(f"layer {layer} out of range 0..{q_traj.num_layers - 1}")
    fp_seq = fp_traj.layer_outputs if on == "output" else fp_traj.layer_inputs
    q_seq = q_traj.layer_outputs if on == "output" else q_traj.layer_inputs
    return np.array(
        [relative_l2(q_seq[k][layer], fp_seq[k][layer]) for k in range(q_traj.num_steps)]
    )


def state_drift(fp_traj: SampleTrajectory, q_traj: SampleTrajectory) -> np.ndarray:
    """Relative l2 distance of the sampled states x_T .. x_0 (length T+1)."""
    if len(fp_traj.states) != len(q_traj.states):
        raise ShapeError(
            f"state counts differ: {len(fp_traj.states)} vs {len(q_traj.states)}"
        )
    return np.array(
        [relative_l2(q, fp) for q, fp in zip(q_traj.states, fp_traj.states)]
    )


def trend_nondecreasing(series) -> bool:
    """Accumulation signature: mean of the second half >= mean of the first."""
    arr = np.asarray(series, dtype=np.float64)
    if arr.size < 2:
        return True
    half = arr.size // 2
    return float(np.mean(arr[half:])) >= float(np.mean(arr[:half]))


# --- per-record metrics and CSV emission --------------------------------


@dataclass(frozen=True)
class MetricsRecord:
    seed: int
    mode: str
    weight_bits: int
    act_bits: int           # 32 stands for full precision
    step: int               # diffusion timestep t (T .. 1)
    layer: int
    drift: float
    act_range: float
    diff_range: float
    quant_err: float
    skipped: bool
    bops: int


def collect_metrics(
    fp_traj: SampleTrajectory, q_traj: SampleTrajectory, weight_bits: int = 8
) -> list:
    """One MetricsRecord per (step, layer), drift measured on layer outputs."""
    _check_comparable(fp_traj, q_traj)
    T = q_traj.num_steps
    act_bits = 32 if q_traj.bits in (None, 0) else q_traj.bits
    if q_traj.mode in ("fp", "cache"):
        act_bits = 32
    records = []
    for k in range(T):
        for l in range(q_traj.num_layers):
            d = q_traj.diags[k][l]
            records.append(
                MetricsRecord(
                    seed=q_traj.seed,
                    mode=q_traj.mode,
                    weight_bits=weight_bits,
                    act_bits=act_bits,
                    step=T - k,
                    layer=l,
                    drift=relative_l2(
                        q_traj.layer_outputs[k][l], fp_traj.layer_outputs[k][l]
                    ),
                    act_range=d.act_range,
                    diff_range=d.residual_range,
                    quant_err=d.quant_error_l2,
                    skipped=d.skipped,
                    bops=d.bops,
                )
            )
    return records


def _record_sort_key(r: MetricsRecord):
    mode_rank = MODE_ORDER.index(r.mode) if r.mode in MODE_ORDER else len(MODE_ORDER)
    return (r.seed, mode_rank, r.weight_bits, r.act_bits, r.step, r.layer)


def write_metrics_csv(fh, records) -> None:
    """Deterministic CSV: header row, stable sort, repr'd floats, LF endings."""
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in sorted(records, key=_record_sort_key):
        w.writerow(
            [
                r.seed, r.mode, r.weight_bits, r.act_bits, r.step, r.layer,
                repr(float(r.drift)), repr(float(r.act_range)),
                repr(float(r.diff_range)), repr(float(r.quant_err)),
                int(r.skipped), r.bops,
            ]
        )


def save_metrics_csv(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        write_metrics_csv(fh, records)


# --- activation statistics ----------------------------------------------


@dataclass(frozen=True)
class ActivationStats:
    step: int               # diffusion timestep t
    layer: int
    act_min: float
    act_q25: float
    act_q50: float
    act_q75: float
    act_max: float
    diff_min: float | None = None
    diff_q25: float | None = None
    diff_q50: float | None = None
    diff_q75: float | None = None
    diff_max: float | None = None

    @property
    def act_range(self) -> float:
        return self.act_max - self.act_min

    @property
    def diff_range(self) -> float | None:
        if self.diff_max is None:
            return None
        return self.diff_max - self.diff_min


def _five_point(arr) -> tuple:
    q25, q50, q75 = np.quantile(arr, (0.25, 0.5, 0.75))
    return float(np.min(arr)), float(q25), float(q50), float(q75), float(np.max(arr))


def activation_stats(traj: SampleTrajectory) -> list:
    """Per step and layer: five-point summaries of the raw layer inputs and
    of their change since the previous sampling step.

    The first recorded step (timestep T) has no predecessor and therefore
    no difference entry.
    """
    out = []
    T = traj.num_steps
    for k in range(T):
        for l in range(traj.num_layers):
            a = traj.layer_inputs[k][l]
            mn, q25, q50, q75, mx = _five_point(a)
            rec = dict(
                step=T - k, layer=l,
                act_min=mn, act_q25=q25, act_q50=q50, act_q75=q75, act_max=mx,
            )
            if k > 0:
                diff = a - traj.layer_inputs[k - 1][l]
                dmn, dq25, dq50, dq75, dmx = _five_point(diff)
                rec.update(
                    diff_min=dmn, diff_q25=dq25, diff_q50=dq50,
                    diff_q75=dq75, diff_max=dmx,
                )
            out.append(ActivationStats(**rec))
    return out


def temporal_concentration(traj: SampleTrajectory) -> dict:
    """Per layer: (median difference range, median activation range, ratio).

    A ratio well below 1 is the whole premise of quantizing temporal
    differences instead of raw activations.
    """
    result = {}
    for l in range(traj.num_layers):
        acts = [value_range(traj.layer_inputs[k][l]) for k in range(traj.num_steps)]
        diffs = [
            value_range(traj.layer_inputs[k][l] - traj.layer_inputs[k - 1][l])
            for k in range(1, traj.num_steps)
        ]
        med_act = float(np.median(acts))
        med_diff = float(np.median(diffs))
        ratio = math.inf if med_act == 0.0 else med_diff / med_act
        result[l] = (med_diff, med_act, ratio)
    return result


# --- stale-activation reuse baseline ------------------------------------


def _reuse_diag(cached_input) -> StepDiagnostics:
    return StepDiagnostics(
        act_range=value_range(cached_input),
        residual_range=0.0,
        quant_error_l2=0.0,
        contraction=0.0,
        skipped=True,
        bops=0,
    )


def cache_reuse_sample(
    net: DenoiserNetwork,
    sched: DiffusionSchedule,
    N,
    rng: RngState,
    sampler: str = "ddim",
    n: int = 16,
    weight_bits: int = 8,
) -> SampleTrajectory:
    """Full-precision sampling that recomputes layer outputs only on every
    N-th step and serves the stale tensors in between.

    N=1 recomputes every step (identical to plain sampling, bit for bit);
    N=inf (or None) recomputes only the very first step. The noise
    discipline mirrors sample(): the state stream is forked off `rng`, so
    paired comparisons against other modes share their x_T and per-step
    noise exactly.
    """
    if sampler not in ("ddpm", "ddim"):
        raise ValueError(f"sampler must be 'ddpm' or 'ddim', got {sampler!r}")
    if N is None:
        N = math.inf
    if N != math.inf:
        if int(N) != N or N < 1:
            raise ValueError(f"reuse interval must be a positive integer or inf: {N}")
        N = int(N)

    noise = rng.fork(0)
    x = noise.normal(size=(n, net.data_dim))
    traj = SampleTrajectory(
        mode="cache", bits=None, sampler=sampler, seed=rng.seed, states=[x.copy()]
    )
    cached_ins: list | None = None
    cached_outs: list | None = None

    for t in range(sched.timesteps, 0, -1):
        step_idx = sched.timesteps - t
        if step_idx % N == 0 or cached_outs is None:
            a = net.input_features(x, t)
            ins, outs, dgs = [], [], []
            for i, layer in enumerate(net.layers):
                ins.append(a)
                o = layer.apply(a)
                outs.append(o)
                dgs.append(_fp_diag(layer, a, weight_bits))
                if i < len(net.layers) - 1:
                    a = apply_activation(o, net.activation)
            cached_ins, cached_outs = ins, outs
        else:
            ins, outs = cached_ins, cached_outs
            dgs = [_reuse_diag(ins[i]) for i in range(len(net.layers))]

        traj.layer_inputs.append(list(ins))
        traj.layer_outputs.append(list(outs))
        traj.diags.append(dgs)

        eps = outs[-1]
        if sampler == "ddpm":
            z = noise.normal(size=x.shape) if t > 1 else np.zeros_like(x)
            x = ddpm_step(x, eps, t, sched, z)
        else:
            x = ddim_step(x, eps, t, sched)
        traj.states.append(x.copy())
    return traj


# --- operation and memory accounting ------------------------------------


def op_totals(traj: SampleTrajectory) -> dict:
    """Summed instrumented counters over every layer-step of a trajectory."""
    totals = dict(adds=0, quant_calls=0, dequant_calls=0, matmuls=0, bops=0)
    for dgs in traj.diags:
        for d in dgs:
            totals["adds"] += d.adds
            totals["quant_calls"] += d.quant_calls
            totals["dequant_calls"] += d.dequant_calls
            totals["matmuls"] += d.matmuls
            totals["bops"] += d.bops
    return totals


def op_overhead(base: SampleTrajectory, other: SampleTrajectory) -> dict:
    """Counter differences (other minus base), summed over the run."""
    a, b = op_totals(base), op_totals(other)
    return {k: b[k] - a[k] for k in a}


def per_step_overhead(
    base: SampleTrajectory, other: SampleTrajectory, from_step: int = 1
) -> dict:
    """Per layer-step counter differences over matched steps.

    from_step defaults to 1 so that a warm-up entry at the first step is
    excluded. The difference must be the same at every compared
    (step, layer) — that uniformity is the point — and a ValueError is
    raised if it is not.
    """
    _check_comparable(base, other)
    if not 0 <= from_step < base.num_steps:
        raise ValueError(f"from_step {from_step} out of range")
    diff = None
    for k in range(from_step, base.num_steps):
        for l in range(base.num_layers):
            db, do = base.diags[k][l], other.diags[k][l]
            cur = dict(
                adds=do.adds - db.adds,
                quant_calls=do.quant_calls - db.quant_calls,
                dequant_calls=do.dequant_calls - db.dequant_calls,
                matmuls=do.matmuls - db.matmuls,
                bops=do.bops - db.bops,
            )
            if diff is None:
                diff = cur
            elif cur != diff:
                raise ValueError(
                    f"overhead is not uniform: step {k} layer {l} gives {cur}, "
                    f"earlier steps gave {diff}"
                )
    return diff


def carried_tensor_count(state: ModulatedLayerState) -> int:
    """How many persistent tensors the layer keeps between steps."""
    return sum(
        arr is not None
        for arr in (state.a_hat, state.o_hat, state.a_prev, state.o_tilde)
    )


def state_memory_bytes(state: ModulatedLayerState) -> int:
    """Bytes held by the persistent per-layer tensors."""
    return sum(
        arr.nbytes
        for arr in (state.a_hat, state.o_hat, state.a_prev, state.o_tilde)
        if arr is not None
    )
