import math

import numpy as np
import pytest

from mdcseg.rng import Rng


def test_splitmix64_reference_vector():
    # Published first output of SplitMix64 for seed 0.
    assert Rng(0).next_u64() == 0xE220A8397B1DCDAF


def test_splitmix64_sequence_is_reproducible():
    a = Rng(1234)
    b = Rng(1234)
    assert [a.next_u64() for _ in range(100)] == [b.next_u64() for _ in range(100)]


def test_next_float_range():
    rng = Rng(7)
    xs = [rng.next_float() for _ in range(10_000)]
    assert all(0.0 <= x < 1.0 for x in xs)
    assert abs(np.mean(xs) - 0.5) < 0.02


def test_uniform_bounds():
    rng = Rng(9)
    xs = [rng.uniform(-20.0, 20.0) for _ in range(1000)]
    assert all(-20.0 <= x < 20.0 for x in xs)


def test_randint_rejects_nonpositive():
    with pytest.raises(ValueError):
        Rng(1).randint(0)


def test_normal_moments():
    rng = Rng(42)
    xs = np.array([rng.normal() for _ in range(20_000)])
    assert np.all(np.isfinite(xs))
    assert abs(xs.mean()) < 0.03
    assert abs(xs.std() - 1.0) < 0.03


def test_derive_gives_independent_streams():
    root = Rng(5)
    a = root.derive(1)
    root2 = Rng(5)
    root2.next_u64()  # derive consumed one draw
    b = root2.derive(2)
    assert a.next_u64() != b.next_u64()


def test_shuffle_is_permutation_and_deterministic():
    items = list(range(50))
    a, b = list(items), list(items)
    Rng(11).shuffle(a)
    Rng(11).shuffle(b)
    assert a == b
    assert sorted(a) == items
    assert a != items  # astronomically unlikely to be identity


def test_normal_draw_count_is_two_uniforms():
    rng1 = Rng(3)
    rng1.normal()
    rng2 = Rng(3)
    rng2.next_float()
    rng2.next_float()
    assert rng1.state == rng2.state


def test_vectorized_draws_match_scalar_sequence():
    a, b = Rng(99), Rng(99)
    vec = a.next_u64_array(257)
    seq = [b.next_u64() for _ in range(257)]
    assert vec.tolist() == seq
    assert a.state == b.state

    a, b = Rng(5), Rng(5)
    np.testing.assert_array_equal(a.next_floats(64),
                                  np.array([b.next_float() for _ in range(64)]))

    a, b = Rng(17), Rng(17)
    np.testing.assert_array_equal(a.normals(50),
                                  np.array([b.normal() for _ in range(50)]))
    assert a.state == b.state
