"""Verification-suite tests, including the mutation sanity check."""

import re

import numpy as np
import pytest

from modiff.quant import QuantizedTensor, dequantize, fit_params, quantize
from modiff.rng import RngState
from modiff.verify import (
    all_passed,
    check_width_rule,
    check_error_bound,
    make_drift_sequence,
    run_verify,
)


def _broken_fake_quant(x, cfg):
    """Deliberately wrong: clamps one level short at the top."""
    p = fit_params(x, cfg)
    q = quantize(x, p, cfg.rounding)
    clipped = np.minimum(q.ints, (1 << cfg.bits) - 2).astype(np.int32)
    return dequantize(QuantizedTensor(ints=clipped, params=q.params))


def test_all_suites_pass_at_reduced_trials():
    reports = run_verify(trials=500)
    assert len(reports) == 10
    assert len({r.name for r in reports}) == 10
    assert all_passed(reports), [r.line() for r in reports if not r.passed]
    for r in reports:
        assert r.trials > 0
        assert r.violations == 0


def test_broken_quantizer_is_caught():
    report = check_error_bound(trials=200, fake_quant_fn=_broken_fake_quant)
    assert not report.passed
    assert report.violations > 0
    assert report.counterexample_seed is not None
    assert report.worst > 1.0
    assert "FAIL" in report.line()


def test_report_line_contents():
    report = check_error_bound(trials=50)
    line = report.line()
    assert "PASS" in line
    assert "50 trials" in line
    assert "0 violations" in line


def test_error_bound_regime_counts_cover_all_trials():
    report = check_error_bound(trials=120)
    counts = [int(m) for m in re.findall(r"in (\d+)", report.detail)]
    assert len(counts) == 3
    assert sum(counts) == 120


def test_width_rule_reports_prescribed_widths():
    report = check_width_rule(c=0.25, dims=(16, 64, 256), trials_per_dim=50)
    assert report.passed
    assert "d=16->b=5" in report.detail
    assert "d=64->b=6" in report.detail
    assert "d=256->b=7" in report.detail


def test_drift_sequence_shapes_and_determinism():
    seq = make_drift_sequence(RngState(4), steps=5, batch=3, dim=7)
    assert len(seq) == 5
    assert all(a.shape == (3, 7) for a in seq)
    again = make_drift_sequence(RngState(4), steps=5, batch=3, dim=7)
    for a, b in zip(seq, again):
        assert np.array_equal(a, b)
    # consecutive entries differ (it is a walk, not a constant)
    assert float(np.max(np.abs(seq[1] - seq[0]))) > 0.0
