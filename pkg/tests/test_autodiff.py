import math

import numpy as np
import pytest

from mdcseg import autodiff as ad
from mdcseg.autodiff import (NonFiniteError, ParamVector, Tape, backward,
                             finite_diff_grad, jvp, value_and_grad)


def pv(values):
    values = np.asarray(values, dtype=np.float64).ravel()
    return ParamVector([("theta", (values.shape[0],), 0)], values)


def rel_err(a, b):
    """Gradient-vector relative error: ||a-b||_inf / max(||a||_inf, ||b||_inf)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), 1e-12)
    return np.max(np.abs(a - b), initial=0.0) / denom


def check_grad(f, theta, tol=1e-6, h=1e-5):
    _, g = value_and_grad(f, theta)
    fd = finite_diff_grad(f, theta, h=h)
    assert rel_err(g.values, fd.values) <= tol, rel_err(g.values, fd.values)


# ---------------------------------------------------------------------------
# value_and_grad / finite_diff_grad contract examples


def test_square_scalar():
    val, grad = value_and_grad(lambda t: ad.asum(ad.mul(t, t)), pv([3.0]))
    assert val == 9.0
    assert grad.values[0] == 6.0


def test_softmax_ce_hand_case():
    # CE of softmax([0, 0]) against class 0 is ln 2; logit gradient (-0.5, +0.5).
    def f(t):
        logits = ad.reshape(t, (1, 2))
        return ad.asum(ad.softmax_cross_entropy(logits, np.array([0])))

    val, grad = value_and_grad(f, pv([0.0, 0.0]))
    assert abs(val - math.log(2.0)) < 1e-15
    np.testing.assert_allclose(grad.values, [-0.5, 0.5], atol=1e-15)


def test_finite_diff_square():
    g = finite_diff_grad(lambda t: ad.asum(ad.mul(t, t)), pv([3.0]), h=1e-5)
    assert abs(g.values[0] - 6.0) <= 1e-8


def test_finite_diff_constant_function():
    g = finite_diff_grad(lambda t: ad.asum(ad.scale(t, 0.0)), pv(np.arange(5.0)), h=1e-5)
    np.testing.assert_array_equal(g.values, np.zeros(5))


def test_finite_diff_matches_analytic_quadratic():
    # f(t) = 0.5 t^T A t + b^T t with symmetric A; gradient is A t + b.
    rng = np.random.default_rng(0)
    A = rng.normal(size=(10, 10))
    A = A + A.T
    b = rng.normal(size=10)
    x = rng.normal(size=10)

    def f(t):
        tv = ad.reshape(t, (1, 1, 1, 10))
        at = ad.pixel_affine(tv, t.tape.const(A), t.tape.const(np.zeros(10)))
        quad = ad.scale(ad.asum(ad.mul(tv, at)), 0.5)
        return ad.add(quad, ad.asum(ad.mul(t, b)))

    grad_fd = finite_diff_grad(f, pv(x), h=1e-5)
    np.testing.assert_allclose(grad_fd.values, A @ x + b, rtol=0, atol=1e-6)


# ---------------------------------------------------------------------------
# Per-op gradient checks against the finite-difference oracle


def _loss_through(op_builder, theta):
    """Reduce an op output to a scalar with a fixed random weighting."""
    return op_builder


def _rand(shape, rng, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, size=shape)


CASES_PER_OP = 12


@pytest.mark.parametrize("seed", range(CASES_PER_OP))
def test_grad_elementwise_ops(seed):
    rng = np.random.default_rng(100 + seed)
    n = int(rng.integers(2, 12))
    a0 = _rand(n, rng)
    b0 = _rand(n, rng) + np.where(rng.uniform(size=n) < 0.5, 2.0, -2.0)  # away from 0
    wgt = _rand(n, rng)

    def f(t):
        a = ad.slice1d(t, 0, n)
        b = ad.slice1d(t, n, n)
        e = ad.add(ad.mul(a, b), ad.div(a, b))
        e = ad.sub(e, ad.neg(a))
        e = ad.scale(ad.shift(e, 0.25), 1.5)
        return ad.asum(ad.mul(e, wgt))

    check_grad(f, pv(np.concatenate([a0, b0])))


@pytest.mark.parametrize("seed", range(CASES_PER_OP))
def test_grad_relu(seed):
    rng = np.random.default_rng(200 + seed)
    n = int(rng.integers(4, 40))
    x = _rand(n, rng)
    x = np.where(np.abs(x) < 1e-2, 0.5, x)  # keep away from the kink for FD
    wgt = _rand(n, rng)
    check_grad(lambda t: ad.asum(ad.mul(ad.relu(t), wgt)), pv(x))


def test_relu_subgradient_zero_at_kink():
    _, g = value_and_grad(lambda t: ad.asum(ad.relu(t)), pv([0.0, -1.0, 2.0]))
    np.testing.assert_array_equal(g.values, [0.0, 0.0, 1.0])


@pytest.mark.parametrize("seed", range(CASES_PER_OP))
def test_grad_conv3x3(seed):
    rng = np.random.default_rng(300 + seed)
    n, h, w = 1, int(rng.integers(2, 6)) * 2, int(rng.integers(2, 6)) * 2
    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = _rand((n, h, w, cin), rng)
    k = _rand((3, 3, cin, cout), rng)
    wgt = _rand((n, h, w, cout), rng)
    nx, nk = x.size, k.size

    def f(t):
        xv = ad.reshape(ad.slice1d(t, 0, nx), x.shape)
        kv = ad.reshape(ad.slice1d(t, nx, nk), k.shape)
        return ad.asum(ad.mul(ad.conv3x3(xv, kv), wgt))

    check_grad(f, pv(np.concatenate([x.ravel(), k.ravel()])))


@pytest.mark.parametrize("seed", range(CASES_PER_OP))
def test_grad_resample_and_bias(seed):
    rng = np.random.default_rng(400 + seed)
    n, h, w, c = 1, int(rng.integers(1, 4)) * 2, int(rng.integers(1, 4)) * 2, int(rng.integers(1, 4))
    x = _rand((n, h, w, c), rng)
    b = _rand(c, rng)
    wgt_d = _rand((n, h // 2, w // 2, c), rng)
    wgt_u = _rand((n, 2 * h, 2 * w, c), rng)

    def f(t):
        xv = ad.reshape(ad.slice1d(t, 0, x.size), x.shape)
        bv = ad.slice1d(t, x.size, c)
        y = ad.bias_add(xv, bv)
        s = ad.asum(ad.mul(ad.down2(y), wgt_d))
        s2 = ad.asum(ad.mul(ad.up2(y), wgt_u))
        return ad.add(s, s2)

    check_grad(f, pv(np.concatenate([x.ravel(), b])))


@pytest.mark.parametrize("seed", range(CASES_PER_OP))
def test_grad_pixel_affine_softmax(seed):
    rng = np.random.default_rng(500 + seed)
    n, h, w = 1, int(rng.integers(1, 5)), int(rng.integers(1, 5))
    d, l = int(rng.integers(2, 6)), int(rng.integers(2, 5))
    x = _rand((n, h, w, d), rng)
    wm = _rand((d, l), rng)
    b = _rand(l, rng)
    wgt = _rand((n, h, w, l), rng)

    def f(t):
        o = 0
        xv = ad.reshape(ad.slice1d(t, o, x.size), x.shape); o += x.size
        wv = ad.reshape(ad.slice1d(t, o, wm.size), wm.shape); o += wm.size
        bv = ad.slice1d(t, o, l)
        return ad.asum(ad.mul(ad.softmax(ad.pixel_affine(xv, wv, bv)), wgt))

    check_grad(f, pv(np.concatenate([x.ravel(), wm.ravel(), b])))


@pytest.mark.parametrize("seed", range(CASES_PER_OP))
def test_grad_softmax_ce(seed):
    rng = np.random.default_rng(600 + seed)
    h, w, l = int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(2, 5))
    logits = _rand((h, w, l), rng, -3, 3)
    labels = rng.integers(0, l, size=(h, w))
    wgt = _rand((h, w), rng, 0.1, 1.0)

    def f(t):
        lv = ad.reshape(t, logits.shape)
        return ad.asum(ad.mul(ad.softmax_cross_entropy(lv, labels), wgt))

    check_grad(f, pv(logits.ravel()))


@pytest.mark.parametrize("seed", range(CASES_PER_OP))
def test_grad_norm_last_and_gather(seed):
    rng = np.random.default_rng(700 + seed)
    h, w, d = int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(2, 5))
    x = _rand((h, w, d), rng) + 0.5  # bounded away from the norm kink at 0
    k = int(rng.integers(1, h * w))
    flat = rng.choice(h * w, size=k, replace=False)
    rows, cols = np.divmod(flat, w)
    wgt = _rand(k, rng)

    def f(t):
        xv = ad.reshape(t, x.shape)
        g = ad.gather_pixels(xv, rows, cols)
        return ad.asum(ad.mul(ad.norm_last(g), wgt))

    check_grad(f, pv(x.ravel()))


@pytest.mark.parametrize("seed", range(CASES_PER_OP))
def test_grad_take_ops(seed):
    rng = np.random.default_rng(800 + seed)
    n, h, w, c = int(rng.integers(2, 4)), int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(2, 4))
    x = _rand((n, h, w, c), rng)
    ci = int(rng.integers(0, c))
    ii = int(rng.integers(0, n))
    w1 = _rand((n, h, w), rng)
    w2 = _rand((h, w, c), rng)

    def f(t):
        xv = ad.reshape(t, x.shape)
        s1 = ad.asum(ad.mul(ad.take_channel(xv, ci), w1))
        s2 = ad.asum(ad.mul(ad.take_index(xv, ii), w2))
        return ad.add(s1, s2)

    check_grad(f, pv(x.ravel()))


def test_softmax_ce_rejects_out_of_range_labels():
    with Tape() as tape:
        logits = tape.leaf(np.zeros((2, 2, 3)))
        with pytest.raises(ad.GraphError, match="label out of range"):
            ad.softmax_cross_entropy(logits, np.array([[0, 1], [2, 3]]))


# ---------------------------------------------------------------------------
# Structural invariants


def test_adjoint_linearity():
    # Backward of a sum of scalars equals the sum of separate backwards.
    x = np.array([0.3, -0.7, 1.1])
    w1 = np.array([1.0, 2.0, 3.0])
    w2 = np.array([-2.0, 0.5, 4.0])

    def f1(t):
        return ad.asum(ad.mul(ad.mul(t, t), w1))

    def f2(t):
        return ad.asum(ad.mul(ad.relu(t), w2))

    _, g1 = value_and_grad(f1, pv(x))
    _, g2 = value_and_grad(f2, pv(x))
    _, g12 = value_and_grad(lambda t: ad.add(f1(t), f2(t)), pv(x))
    np.testing.assert_array_equal(g12.values, g1.values + g2.values)


def test_determinism_bit_identical():
    rng = np.random.default_rng(1)
    x = rng.normal(size=20)
    wgt = rng.normal(size=20)

    def f(t):
        return ad.asum(ad.mul(ad.relu(ad.mul(t, t)), wgt))

    v1, g1 = value_and_grad(f, pv(x))
    v2, g2 = value_and_grad(f, pv(x))
    assert v1 == v2
    assert g1.values.tobytes() == g2.values.tobytes()


def test_nonfinite_faults_with_op_and_index():
    def f(t):
        return ad.asum(ad.div(t, ad.sub(t, t)))  # 0/0

    with pytest.raises(NonFiniteError, match=r"op 'div' \(record \d+\)"):
        value_and_grad(f, pv([1.0]))


def test_backward_requires_scalar():
    with Tape() as tape:
        t = tape.leaf(np.ones(3))
        y = ad.mul(t, t)
        with pytest.raises(ad.GraphError):
            backward(y)


def test_cross_tape_mix_rejected():
    with Tape() as t1, Tape() as t2:
        a = t1.leaf(np.ones(2))
        b = t2.leaf(np.ones(2))
        with pytest.raises(ad.GraphError):
            ad.add(a, b)


def test_jvp_matches_directional_derivative():
    rng = np.random.default_rng(9)
    x = rng.normal(size=12)
    wgt = rng.normal(size=12)
    direction = rng.normal(size=12)

    def build(tape, vals):
        t = tape.leaf(vals)
        out = ad.asum(ad.mul(ad.relu(ad.mul(t, t)), wgt))
        return t, out

    with Tape() as tape:
        t, out = build(tape, x)
        tans = jvp(tape, {t.idx: direction})
        jvp_val = float(tans[out.idx])

    h = 1e-6
    with Tape() as tp:
        _, op = build(tp, x + h * direction)
        fp = float(op.data)
    with Tape() as tm:
        _, om = build(tm, x - h * direction)
        fm = float(om.data)
    assert abs(jvp_val - (fp - fm) / (2 * h)) < 1e-8 * max(1.0, abs(jvp_val))


def test_param_vector_layout_validation():
    with pytest.raises(ad.GraphError):
        ParamVector([("a", (2,), 0), ("b", (2,), 3)], np.zeros(5))
    with pytest.raises(ad.GraphError):
        ParamVector([("a", (2,), 0)], np.zeros(3))


def test_arena_accounting_releases():
    ad.arena_reset_peak()
    live0 = ad.arena_live_bytes()
    with Tape() as tape:
        t = tape.leaf(np.ones(1000))
        ad.asum(ad.mul(t, t))
        assert ad.arena_live_bytes() > live0
    assert ad.arena_live_bytes() == live0
    assert ad.arena_peak_bytes() >= live0
