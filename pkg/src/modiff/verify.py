"""Randomized verification suites for the quantizer and modulation bounds.

Each suite draws seeded trials, measures every quantity it needs (per-call
contraction ratios, operator norms, raw deltas) and checks the claimed
inequality with a pinned floating-point slack. A suite never assumes a
contraction regime — it measures and reports it. The error-bound suite
accepts an injectable quantizer so a deliberately broken implementation
can demonstrate that the check actually bites.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .modulated import (
    LinearLayer,
    forward_ec,
    forward_modulated,
    make_state,
    warmup,
)
from .quant import (
    QuantConfig,
    bits_for_contraction,
    contraction_ratio,
    error_bound,
    fake_quant,
    fit_params,
)
from .rng import RngState
from .tensorops import operator_norm, relative_l2

_DISTRIBUTIONS = ("uniform", "gaussian", "lognormal")


@dataclass
class Report:
    """Outcome of one verification suite."""

    name: str
    trials: int
    violations: int
    worst: float                       # peak measured/allowed ratio (<= 1 passes)
    counterexample_seed: int | None = None
    detail: str = ""

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        msg = (
            f"[{tag}] {self.name}: {self.trials} trials, "
            f"{self.violations} violations, worst margin {self.worst:.3e}"
        )
        if self.counterexample_seed is not None:
            msg += f", counterexample seed {self.counterexample_seed}"
        if self.detail:
            msg += f" ({self.detail})"
        return msg


def all_passed(reports) -> bool:
    return all(r.passed for r in reports)


# --- shared generators --------------------------------------------------


def make_drift_sequence(rng: RngState, steps: int, batch=4, dim=24, scale=0.15):
    """Random-walk activation sequence; entry 0 is the warm-up input."""
    seq = [rng.normal(size=(batch, dim))]
    for _ in range(steps - 1):
        seq.append(seq[-1] + scale * rng.normal(size=(batch, dim)))
    return seq


def _random_layer(rng: RngState, din=24, dout=16, bias=True) -> LinearLayer:
    w = rng.normal(size=(din, dout)) / math.sqrt(din)
    b = 0.1 * rng.normal(size=dout) if bias else None
    return LinearLayer(weight=w, bias=b)


def _draw_tensor(rng: RngState, kind: str, d: int):
    if kind == "uniform":
        return rng.uniform(size=d) * 4.0 - 2.0
    if kind == "gaussian":
        return rng.normal(size=d)
    return np.exp(rng.normal(size=d))


# --- quantizer suites ---------------------------------------------------


def check_error_bound(trials=10_000, seed=2024, fake_quant_fn=None) -> Report:
    """Worst-case reconstruction error bound, floor plus the nearest analog.

    Per trial: one distribution x dimension x bit-width draw, checked in
    both rounding modes. The floor-mode contraction ratio is bucketed so
    the report shows which regimes the random family actually visits.
    """
    fq = fake_quant_fn or fake_quant
    root = RngState(seed)
    violations, worst = 0, 0.0
    worst_seed = None
    regimes = [0, 0, 0]
    for trial in range(trials):
        rng = root.fork(trial)
        kind = _DISTRIBUTIONS[trial % len(_DISTRIBUTIONS)]
        d = int(rng.integers(4, 1025))
        b = int(rng.integers(1, 9))
        x = _draw_tensor(rng, kind, d)
        bad = False
        for rounding in ("floor", "nearest"):
            qx = fq(x, QuantConfig(bits=b, rounding=rounding))
            err2 = float(np.sum((x - qx) ** 2))
            bound = error_bound(x, b, rounding)
            ratio = err2 / bound if bound > 0 else float(err2 > 0)
            worst = max(worst, ratio)
            if err2 > bound * (1 + 1e-12):
                bad = True
            if rounding == "floor":
                c = contraction_ratio(x, qx)
                regimes[0 if c < 0.5 else (1 if c < 1.0 else 2)] += 1
        if bad:
            violations += 1
            if worst_seed is None:
                worst_seed = trial
    detail = (
        f"floor contraction: c<1/2 in {regimes[0]}, "
        f"1/2<=c<1 in {regimes[1]}, c>=1 in {regimes[2]} trials"
    )
    return Report("quantizer error bound", trials, violations, worst, worst_seed, detail)


def check_rounding_edges(trials=2000, seed=2025) -> Report:
    """Clamp behaviour on the quantizer's own fit.

    Floor mode may land one step below zero before the clamp (bottom edge
    only) and keeps per-element error within one step; nearest mode never
    needs the clamp at all and stays within half a step.
    """
    root = RngState(seed)
    violations, worst = 0, 0.0
    worst_seed = None
    bottom_clips = 0
    for trial in range(trials):
        rng = root.fork(trial)
        d = int(rng.integers(16, 513))
        b = int(rng.integers(1, 9))
        x = rng.normal(size=d) + rng.uniform() * 4.0 - 2.0
        bad = False

        p = fit_params(x, QuantConfig(bits=b, rounding="floor"))
        s = float(p.scale)
        pre = np.floor(x / s) + int(p.zero_point)
        if pre.max() > (1 << b) - 1 or pre.min() < -1:
            bad = True
        bottom_clips += pre.min() == -1
        err = float(np.max(np.abs(x - fake_quant(x, QuantConfig(bits=b, rounding="floor")))))
        worst = max(worst, err / s)
        if err > s * (1 + 1e-12):
            bad = True

        pn = fit_params(x, QuantConfig(bits=b, rounding="nearest"))
        sn = float(pn.scale)
        pre_n = np.rint(x / sn) + int(pn.zero_point)
        if pre_n.min() < 0 or pre_n.max() > (1 << b) - 1:
            bad = True
        err_n = float(
            np.max(np.abs(x - fake_quant(x, QuantConfig(bits=b, rounding="nearest"))))
        )
        worst = max(worst, err_n / (sn / 2))
        if err_n > sn / 2 * (1 + 1e-12):
            bad = True

        if bad:
            violations += 1
            if worst_seed is None:
                worst_seed = trial
    detail = f"bottom pre-clamp engaged in {bottom_clips} trials, top never"
    return Report("rounding edge behaviour", trials, violations, worst, worst_seed, detail)


def check_monotone_bits(trials=300, seed=309) -> Report:
    """More bits never hurt, on the family where that is actually true:
    floor mode from 2 bits up, nearest mode from 1 bit, dims >= 16."""
    root = RngState(seed)
    violations, worst = 0, 0.0
    worst_seed = None
    for trial in range(trials):
        rng = root.fork(trial)
        x = rng.normal(size=int(rng.integers(16, 257)))
        bad = False
        for rounding, b_lo in (("floor", 2), ("nearest", 1)):
            errs = [
                float(
                    np.sum(
                        (x - fake_quant(x, QuantConfig(bits=bb, rounding=rounding))) ** 2
                    )
                )
                for bb in range(b_lo, 9)
            ]
            for hi_bits_err, lo_bits_err in zip(errs[1:], errs[:-1]):
                if lo_bits_err > 0:
                    worst = max(worst, hi_bits_err / lo_bits_err)
                if hi_bits_err > lo_bits_err * (1 + 1e-9):
                    bad = True
        if bad:
            violations += 1
            if worst_seed is None:
                worst_seed = trial
    return Report("monotone improvement in bits", trials, violations, worst, worst_seed)


def check_channel_vs_tensor(trials=200, seed=2026) -> Report:
    """Channel-wise fit must equal an independent tensor-wise fit per slice."""
    root = RngState(seed)
    violations, worst = 0, 0.0
    worst_seed = None
    for trial in range(trials):
        rng = root.fork(trial)
        rows = int(rng.integers(3, 9))
        cols = int(rng.integers(4, 65))
        x = rng.normal(size=(rows, cols)) * (1.0 + rng.uniform(size=cols) * 3.0)
        got = fake_quant(x, QuantConfig(bits=4, granularity="channel", axis=1))
        bad = False
        for j in range(cols):
            want = fake_quant(x[:, j], QuantConfig(bits=4))
            dev = float(np.max(np.abs(got[:, j] - want)))
            scale_ref = max(float(np.max(np.abs(want))), 1e-12)
            worst = max(worst, dev / (scale_ref * 1e-12 + 1e-300))
            if dev > scale_ref * 1e-12:
                bad = True
        if bad:
            violations += 1
            if worst_seed is None:
                worst_seed = trial
    return Report("channel-wise equals per-slice fit", trials, violations, worst, worst_seed)


def check_width_rule(c=0.25, dims=(16, 64, 256), trials_per_dim=1000, seed=9000) -> Report:
    """The prescribed bit-width keeps the measured contraction at or below c."""
    root = RngState(seed)
    violations, worst = 0, 0.0
    worst_seed = None
    widths = {}
    total = 0
    for d in dims:
        b = bits_for_contraction(d, c)
        widths[d] = b
        cfg = QuantConfig(bits=b, rounding="floor")
        for trial in range(trials_per_dim):
            total += 1
            rng = root.fork(d * 100_000 + trial)
            kind = _DISTRIBUTIONS[trial % len(_DISTRIBUTIONS)]
            x = _draw_tensor(rng, kind, d)
            ratio = contraction_ratio(x, fake_quant(x, cfg))
            worst = max(worst, ratio / c)
            if ratio > c * (1 + 1e-12):
                violations += 1
                if worst_seed is None:
                    worst_seed = d * 100_000 + trial
    detail = "prescribed widths: " + ", ".join(f"d={d}->b={b}" for d, b in widths.items())
    return Report(
        f"prescribed-width contraction at c={c}", total, violations, worst,
        worst_seed, detail,
    )


# --- modulation suites --------------------------------------------------


def check_reformulation_exactness(seeds=20, steps=100, seed0=5000) -> Report:
    """With an identity quantizer both modulated paths track the direct
    full-precision output within 1e-5 relative at every step."""
    identity = QuantConfig(bits=None)
    violations, worst = 0, 0.0
    worst_seed = None
    for s in range(seeds):
        base = RngState(seed0 + s)
        layer = _random_layer(base.fork(1))
        seq = make_drift_sequence(base.fork(2), steps)
        st_mod = make_state("modulated", identity)
        st_ec = make_state("ec", identity)
        warmup(st_mod, layer, seq[0])
        warmup(st_ec, layer, seq[0])
        bad = False
        for a in seq[1:]:
            ref = layer.apply(a)
            o_mod, _ = forward_modulated(st_mod, layer, a)
            o_ec, _ = forward_ec(st_ec, layer, a)
            rel = max(relative_l2(o_mod, ref), relative_l2(o_ec, ref))
            worst = max(worst, rel / 1e-5)
            if rel > 1e-5:
                bad = True
        if bad:
            violations += 1
            if worst_seed is None:
                worst_seed = seed0 + s
    return Report("reformulation exactness (identity quantizer)", seeds, violations, worst, worst_seed)


def check_ec_identities(seeds=6, steps=60, bits=(2, 3, 4, 6, 8), seed0=6000) -> Report:
    """Structural identities of the compensated path at real bit-widths:
    the cached output equals the layer applied to the cached input, and
    the tracking gap equals the current step's quantization error alone."""
    violations, worst = 0, 0.0
    worst_seed = None
    trials = 0
    for b in bits:
        cfg = QuantConfig(bits=b)
        for s in range(seeds):
            trials += 1
            base = RngState(seed0 + s)
            layer = _random_layer(base.fork(1))
            seq = make_drift_sequence(base.fork(2), steps)
            st = make_state("ec", cfg)
            warmup(st, layer, seq[0])
            bad = False
            for a in seq[1:]:
                before = st.a_hat.copy()
                forward_ec(st, layer, a)
                rel = relative_l2(st.o_hat, layer.apply(st.a_hat))
                worst = max(worst, rel / 1e-9)
                if rel > 1e-9:
                    bad = True
                resid = a - before
                expected_gap = resid - fake_quant(resid, cfg)
                gap = a - st.a_hat
                dev = float(np.linalg.norm(gap - expected_gap))
                allowed = 1e-10 * max(1.0, float(np.linalg.norm(expected_gap)))
                worst = max(worst, dev / allowed)
                if dev > allowed:
                    bad = True
            if bad:
                violations += 1
                if worst_seed is None:
                    worst_seed = seed0 + s
    return Report("error-compensation identities", trials, violations, worst, worst_seed)


def check_per_step_bound(seeds=6, steps=60, bits=(2, 3, 4, 6, 8), seed0=7000) -> Report:
    """Per-step output error against sqrt(c) * ||A||_2 * tracking gap, with
    c measured on the very call being checked."""
    violations, worst = 0, 0.0
    worst_seed = None
    trials = 0
    for b in bits:
        cfg = QuantConfig(bits=b)
        for s in range(seeds):
            trials += 1
            base = RngState(seed0 + s)
            layer = _random_layer(base.fork(1))
            opn = operator_norm(layer.weight, tol=1e-13)
            seq = make_drift_sequence(base.fork(2), steps)
            st = make_state("ec", cfg)
            warmup(st, layer, seq[0])
            bad = False
            for a in seq[1:]:
                gap = float(np.linalg.norm(a - st.a_hat))
                o, diag = forward_ec(st, layer, a)
                lhs = float(np.linalg.norm(layer.apply(a) - o))
                rhs = math.sqrt(diag.contraction) * opn * gap * (1 + 1e-6) + 1e-12
                worst = max(worst, lhs / rhs if rhs > 0 else float(lhs > 0))
                if lhs > rhs:
                    bad = True
            if bad:
                violations += 1
                if worst_seed is None:
                    worst_seed = seed0 + s
    return Report("per-step compensated error bound", trials, violations, worst, worst_seed)


def check_accumulation_bounds(seeds=6, steps=100, bits=(3, 4, 6), seed0=8000) -> Report:
    """Accumulated error bounds, evaluated as the recurrences they come from.

    Without compensation the step error obeys
        E_t <= 2 c_t ||A||^2 ||delta_t||^2 + 2 E_prev,
    so the right-hand side accumulated from measured per-call contractions
    bounds the measured error at every step (doubling of old terms is the
    accumulation signature). With compensation the tracking gap obeys
        G_t <= 2 ||delta_t||^2 + 2 c_prev G_prev,
    and the output error stays within c_t ||A||^2 G_t — no doubling chain
    on the output error itself.
    """
    violations, worst = 0, 0.0
    worst_seed = None
    trials = 0
    for b in bits:
        cfg = QuantConfig(bits=b)
        for s in range(seeds):
            trials += 1
            base = RngState(seed0 + s)
            layer = _random_layer(base.fork(1))
            opn2 = operator_norm(layer.weight, tol=1e-13) ** 2 * (1 + 1e-6)
            seq = make_drift_sequence(base.fork(2), steps)
            bad = False

            st = make_state("modulated", cfg)
            warmup(st, layer, seq[0])
            bound = 0.0
            for j in range(1, steps):
                a = seq[j]
                delta2 = float(np.sum((a - seq[j - 1]) ** 2))
                o, diag = forward_modulated(st, layer, a)
                bound = 2.0 * diag.contraction * opn2 * delta2 + 2.0 * bound
                err2 = float(np.sum((layer.apply(a) - o) ** 2))
                allowed = bound * (1 + 1e-9) + 1e-15
                worst = max(worst, err2 / allowed)
                if err2 > allowed:
                    bad = True

            st = make_state("ec", cfg)
            warmup(st, layer, seq[0])
            gap_bound, c_prev = 0.0, 0.0
            for j in range(1, steps):
                a = seq[j]
                delta2 = float(np.sum((a - seq[j - 1]) ** 2))
                gap2 = float(np.sum((a - st.a_hat) ** 2))
                o, diag = forward_ec(st, layer, a)
                gap_bound = 2.0 * delta2 + 2.0 * c_prev * gap_bound
                allowed_gap = gap_bound * (1 + 1e-9) + 1e-15
                worst = max(worst, gap2 / allowed_gap)
                if gap2 > allowed_gap:
                    bad = True
                err2 = float(np.sum((layer.apply(a) - o) ** 2))
                allowed = diag.contraction * opn2 * gap2 * (1 + 1e-9) + 1e-15
                worst = max(worst, err2 / allowed if allowed > 0 else float(err2 > 0))
                if err2 > allowed:
                    bad = True
                c_prev = diag.contraction
            if bad:
                violations += 1
                if worst_seed is None:
                    worst_seed = seed0 + s
    return Report("accumulated error recurrences", trials, violations, worst, worst_seed)


def check_warmup_contraction(seeds=10, ks=(1, 2, 3, 5), bits=4, seed0=9100) -> Report:
    """Repeated warm-up contracts the input gap geometrically in the
    worst measured per-pass ratio."""
    cfg = QuantConfig(bits=bits)
    violations, worst = 0, 0.0
    worst_seed = None
    trials = 0
    for s in range(seeds):
        base = RngState(seed0 + s)
        layer = _random_layer(base.fork(1), din=64, dout=32)
        a = base.fork(2).normal(size=(4, 64))
        norm_a = float(np.linalg.norm(a))
        bad = False
        for k in ks:
            trials += 1
            st = make_state("ec", cfg)
            _, diags = warmup(st, layer, a, mode="repeated", k=k)
            c_max = max(d.contraction for d in diags)
            gap = float(np.linalg.norm(a - st.a_hat))
            allowed = c_max ** (k / 2.0) * norm_a * (1 + 1e-9) + 1e-12
            worst = max(worst, gap / allowed)
            if gap > allowed:
                bad = True
        if bad:
            violations += 1
            if worst_seed is None:
                worst_seed = seed0 + s
    return Report("repeated warm-up contraction", trials, violations, worst, worst_seed)


# --- top level ----------------------------------------------------------


def run_verify(trials=10_000, seed=2024, fake_quant_fn=None, contraction=0.25):
    """Run every suite; returns the list of Reports in a stable order."""
    return [
        check_error_bound(trials=trials, seed=seed, fake_quant_fn=fake_quant_fn),
        check_rounding_edges(),
        check_monotone_bits(),
        check_channel_vs_tensor(),
        check_width_rule(c=contraction),
        check_reformulation_exactness(),
        check_ec_identities(),
        check_per_step_bound(),
        check_accumulation_bounds(),
        check_warmup_contraction(),
    ]
