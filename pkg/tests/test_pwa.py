"""Tests for the piecewise-affine tanh approximation.

The independent error oracle integrates |tanh - chord| per segment two ways:
a dense trapezoid rule and the closed form ln(cosh b) - ln(cosh a) minus the
chord area (valid where the chord stays below tanh).
"""

import numpy as np
import pytest

from romopt.pwa import (
    PwaCurve,
    adaptive_fit,
    eval_curve,
    load_curve_csv,
    plot_curve_svg,
    save_curve_csv,
    total_error,
    uniform_fit,
)


def trapezoid_error(curve: PwaCurve, points_per_segment: int = 60000) -> float:
    """Independent quadrature oracle: dense trapezoid per segment."""
    total = 0.0
    bp, v = curve.breakpoints, curve.values
    for i in range(curve.n_segments):
        z = np.linspace(bp[i], bp[i + 1], points_per_segment)
        chord = np.interp(z, bp, v)
        total += np.trapezoid(np.abs(np.tanh(z) - chord), z)
    return total


def logcosh_error(curve: PwaCurve) -> float:
    """Closed-form oracle using the tanh antiderivative ln cosh."""
    total = 0.0
    bp, v = curve.breakpoints, curve.values
    for i in range(curve.n_segments):
        a, b = bp[i], bp[i + 1]
        exact = np.log(np.cosh(b)) - np.log(np.cosh(a))
        chord_area = 0.5 * (v[i] + v[i + 1]) * (b - a)
        total += abs(exact - chord_area)
    return total


def test_breakpoints_interpolate_tanh():
    for curve in (adaptive_fit(6), uniform_fit(6)):
        assert np.max(np.abs(curve.values - np.tanh(curve.breakpoints))) <= 1e-12


def test_single_half_segment_is_one_chord():
    curve = adaptive_fit(1, z_max=4.0)
    assert curve.breakpoints.tolist() == [-4.0, 0.0, 4.0]
    assert eval_curve(curve, 2.0) == pytest.approx(np.tanh(4.0) / 2.0)


def test_uniform_breakpoints():
    curve = uniform_fit(2, z_max=4.0)
    assert np.allclose(curve.breakpoints, [-4.0, -2.0, 0.0, 2.0, 4.0])


def test_odd_symmetry():
    curve = adaptive_fit(8)
    bp = curve.breakpoints
    assert np.allclose(bp, -bp[::-1], atol=1e-12)
    z = np.linspace(-10, 10, 1001)
    assert np.max(np.abs(eval_curve(curve, z) + eval_curve(curve, -z))) <= 1e-12


def test_zero_is_breakpoint_and_maps_to_zero():
    curve = adaptive_fit(5)
    assert 0.0 in curve.breakpoints.tolist()
    assert eval_curve(curve, 0.0) == 0.0


def test_plateau_saturation():
    curve = adaptive_fit(4, z_max=8.0)
    assert eval_curve(curve, 100.0) == 1.0
    assert eval_curve(curve, -100.0) == -1.0
    # plateau joint continuous within the z_max tolerance
    assert abs(eval_curve(curve, 8.0) - 1.0) <= 1e-6


def test_eval_at_breakpoints_exact():
    curve = adaptive_fit(7)
    assert np.allclose(
        eval_curve(curve, curve.breakpoints), np.tanh(curve.breakpoints), atol=1e-12
    )


def test_overestimation_structure():
    # chords of a concave function lie below it: PWA <= tanh on z > 0
    curve = adaptive_fit(9)
    z = np.linspace(1e-9, curve.z_max, 5000)
    assert np.all(eval_curve(curve, z) <= np.tanh(z) + 1e-12)
    zneg = -z
    assert np.all(eval_curve(curve, zneg) >= np.tanh(zneg) - 1e-12)


def test_total_error_matches_trapezoid_oracle():
    for curve in (adaptive_fit(1, z_max=4.0), adaptive_fit(8), uniform_fit(8)):
        est = total_error(curve)
        oracle = trapezoid_error(curve)
        assert est == pytest.approx(oracle, abs=1e-6)


def test_total_error_matches_logcosh_oracle():
    curve = adaptive_fit(10)
    assert total_error(curve) == pytest.approx(logcosh_error(curve), abs=1e-8)


def test_adaptive_beats_uniform_at_benchmark_sizes():
    for half in (15, 29):  # N' = 30 and 58
        adaptive = adaptive_fit(half)
        uniform = uniform_fit(half)
        assert total_error(adaptive) < total_error(uniform)


def test_error_decreases_with_refinement():
    errs = [total_error(adaptive_fit(h)) for h in (2, 4, 8, 16)]
    assert all(a > b for a, b in zip(errs, errs[1:]))


def test_uniform_error_strictly_positive():
    assert total_error(uniform_fit(64)) > 0.0


def test_each_insertion_strictly_reduces_segment_error():
    # rebuild the adaptive loop and track the split segment's error
    from romopt.pwa import _golden_min, _segment_error

    pos = [0.0, 8.0]
    for _ in range(12):
        errs = [_segment_error(a, b) for a, b in zip(pos, pos[1:])]
        i = int(np.argmax(errs))
        a, b = pos[i], pos[i + 1]
        t = _golden_min(lambda t: _segment_error(a, t) + _segment_error(t, b), a, b)
        new_err = _segment_error(a, t) + _segment_error(t, b)
        assert new_err < errs[i]
        pos.insert(i + 1, t)


def test_adaptive_deterministic():
    a = adaptive_fit(15)
    b = adaptive_fit(15)
    assert np.array_equal(a.breakpoints, b.breakpoints)


def test_invalid_inputs_rejected():
    with pytest.raises(ValueError):
        adaptive_fit(0)
    with pytest.raises(ValueError):
        uniform_fit(3, z_max=-1.0)
    with pytest.raises(ValueError):
        total_error(adaptive_fit(2), points_per_segment=100)
    with pytest.raises(ValueError):
        PwaCurve(breakpoints=np.array([1.0, 2.0]), values=np.tanh([1.0, 2.0]))


def test_csv_round_trip(tmp_path):
    curve = adaptive_fit(15)
    path = tmp_path / "curve.csv"
    save_curve_csv(curve, path)
    back = load_curve_csv(path)
    assert np.array_equal(back.breakpoints, curve.breakpoints)
    assert np.array_equal(back.values, curve.values)


def test_svg_emitter(tmp_path):
    path = tmp_path / "curve.svg"
    plot_curve_svg(adaptive_fit(6), path)
    text = path.read_text()
    assert text.lstrip().startswith("<?xml")
    assert "svg" in text[:400]
