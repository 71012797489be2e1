"""Gradient perturbation defenses."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradlab.defenses import GradientDefense, apply_defense, parse_defense
from gradlab.errors import UsageError
from gradlab.optim import GradientCapture, LayoutEntry


def _capture(values, split=None):
    values = np.asarray(values, dtype=np.float64)
    if split is None:
        layout = (LayoutEntry("g", 0, values.size, (values.size,)),)
    else:
        layout = (
            LayoutEntry("a", 0, split, (split,)),
            LayoutEntry("b", split, values.size - split, (values.size - split,)),
        )
    return GradientCapture(values.copy(), layout)


def test_none_is_bitwise_identity(rng):
    cap = _capture(rng.standard_normal(64))
    out = apply_defense(cap, GradientDefense("none"))
    assert out.values.tobytes() == cap.values.tobytes()
    assert out.layout == cap.layout


def test_compression_example_from_contract():
    vals = [5, -1, 3, 0.5, -2, 4, -0.1, 6, 2, -3]
    out = apply_defense(_capture(vals), GradientDefense("compression", prune_ratio=0.10))
    expected = list(vals)
    expected[6] = 0.0  # the -0.1 entry has the smallest magnitude; floor(0.1*10) = 1
    assert out.values.tolist() == expected


def test_compression_tie_break_by_flat_index():
    vals = [1.0, -1.0, 1.0, 2.0]
    out = apply_defense(_capture(vals), GradientDefense("compression", prune_ratio=0.5))
    # two zeros; ties on |1.0| resolved by ascending index -> positions 0 and 1
    assert out.values.tolist() == [0.0, 0.0, 1.0, 2.0]


def test_compression_survivors_exact(rng):
    vals = rng.standard_normal(101)
    ratio = 0.25
    out = apply_defense(_capture(vals), GradientDefense("compression", prune_ratio=ratio))
    m = int(np.floor(ratio * vals.size))
    zeroed = np.flatnonzero(out.values == 0.0)
    expected = np.sort(np.argsort(np.abs(vals), kind="stable")[:m])
    assert np.array_equal(zeroed, expected)
    survivors = np.setdiff1d(np.arange(vals.size), zeroed)
    assert np.array_equal(out.values[survivors], vals[survivors])


@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=60),
       st.floats(0, 0.99))
@settings(max_examples=80, deadline=None)
def test_compression_count_property(vals, ratio):
    arr = np.asarray(vals, dtype=np.float64)
    out = apply_defense(_capture(arr), GradientDefense("compression", prune_ratio=ratio))
    m = int(np.floor(ratio * arr.size))
    changed = np.flatnonzero(out.values != arr)
    assert changed.size <= m  # entries already equal to zero stay "unchanged"
    assert np.count_nonzero(out.values == 0.0) >= m


def test_per_layer_compression_budgets():
    vals = [0.1, 5.0, 4.0, 3.0, 0.2, 9.0, 8.0, 7.0]
    d = GradientDefense("compression", prune_ratio=0.25, per_layer=True)
    out = apply_defense(_capture(vals, split=4), d)
    assert out.values.tolist() == [0.0, 5.0, 4.0, 3.0, 0.0, 9.0, 8.0, 7.0]


def test_noise_std_within_five_percent():
    n = 100_000
    cap = _capture(np.zeros(n))
    d = GradientDefense("gaussian_noise", sigma=1e-3, seed=7)
    out = apply_defense(cap, d)
    measured = np.std(out.values - cap.values)
    assert abs(measured - 1e-3) / 1e-3 < 0.05


def test_noise_seed_reproducible(rng):
    cap = _capture(rng.standard_normal(32))
    d = GradientDefense("gaussian_noise", sigma=0.5, seed=3)
    a = apply_defense(cap, d)
    b = apply_defense(cap, d)
    assert np.array_equal(a.values, b.values)
    c = apply_defense(cap, GradientDefense("gaussian_noise", sigma=0.5, seed=4))
    assert not np.array_equal(a.values, c.values)


def test_defense_preserves_length_and_layout(rng):
    cap = _capture(rng.standard_normal(50), split=20)
    for d in (GradientDefense("gaussian_noise", sigma=0.1, seed=0),
              GradientDefense("compression", prune_ratio=0.3)):
        out = apply_defense(cap, d)
        assert out.values.shape == cap.values.shape
        assert out.layout == cap.layout


def test_parse_defense_strings():
    assert parse_defense("none").kind == "none"
    d = parse_defense("ng:1e-2")
    assert d.kind == "gaussian_noise" and d.sigma == 1e-2
    d = parse_defense("gc:0.10")
    assert d.kind == "compression" and d.prune_ratio == 0.10
    with pytest.raises(UsageError):
        parse_defense("quantize:8")
    with pytest.raises(UsageError):
        parse_defense("ng:lots")


def test_defense_validation():
    with pytest.raises(UsageError):
        GradientDefense("gaussian_noise", sigma=0.0)
    with pytest.raises(UsageError):
        GradientDefense("compression", prune_ratio=1.0)
    with pytest.raises(UsageError):
        GradientDefense("homomorphic")


def test_spec_string_round_trip():
    for text in ("none", "ng:0.01", "gc:0.1"):
        assert parse_defense(text).spec_string() == text
