import numpy as np
import pytest

from mlct import autodiff as ad
from gradcheck import fd_check

TOL = 1e-4


def rnd(*shape, seed=0, lo=-1.0, hi=1.0):
    return np.random.default_rng(seed).uniform(lo, hi, size=shape)


def weighted(y, seed=99):
    # random linear functional so every output entry matters
    R = np.random.default_rng(seed).normal(size=y.value.shape)
    return ad.sum_(y * R)


OPS = {
    "add": (lambda t, v: weighted(v["a"] + v["b"]), {"a": rnd(3, 4), "b": rnd(1, 4, seed=1)}),
    "sub": (lambda t, v: weighted(v["a"] - v["b"]), {"a": rnd(3, 4), "b": rnd(3, 1, seed=1)}),
    "mul": (lambda t, v: weighted(v["a"] * v["b"]), {"a": rnd(3, 4), "b": rnd(3, 4, seed=1)}),
    "matmul": (lambda t, v: weighted(v["a"] @ v["b"]), {"a": rnd(3, 4), "b": rnd(4, 5, seed=1)}),
    "linear": (lambda t, v: weighted(ad.linear(v["x"], v["w"], v["b"])),
               {"x": rnd(3, 4), "w": rnd(4, 2, seed=1), "b": rnd(2, seed=2)}),
    "linear_nobias": (lambda t, v: weighted(ad.linear(v["x"], v["w"])), {"x": rnd(3, 4), "w": rnd(4, 2, seed=1)}),
    "silu": (lambda t, v: weighted(ad.silu(v["x"])), {"x": rnd(3, 4, lo=-3, hi=3)}),
    "tanh": (lambda t, v: weighted(ad.tanh(v["x"])), {"x": rnd(3, 4, lo=-2, hi=2)}),
    "exp": (lambda t, v: weighted(ad.exp(v["x"])), {"x": rnd(3, 4)}),
    "sqrt": (lambda t, v: weighted(ad.sqrt(v["x"])), {"x": rnd(3, 4, lo=0.5, hi=2)}),
    "square": (lambda t, v: weighted(ad.square(v["x"])), {"x": rnd(3, 4)}),
    "abs": (lambda t, v: weighted(ad.abs_(v["x"])), {"x": rnd(3, 4, lo=0.1, hi=1) * np.sign(rnd(3, 4, seed=5))}),
    "sum_axis": (lambda t, v: weighted(ad.sum_(v["x"], axis=1)), {"x": rnd(3, 4)}),
    "mean_axis": (lambda t, v: weighted(ad.mean(v["x"], axis=0)), {"x": rnd(3, 4)}),
    "reshape": (lambda t, v: weighted(ad.reshape(v["x"], (4, 3))), {"x": rnd(3, 4)}),
    "getitem_slice": (lambda t, v: weighted(v["x"][1:3]), {"x": rnd(4, 3)}),
    "getitem_fancy": (lambda t, v: weighted(v["x"][np.array([0, 2, 2])]), {"x": rnd(4, 3)}),
    "concat": (lambda t, v: weighted(ad.concat([v["a"], v["b"]], axis=1)), {"a": rnd(3, 2), "b": rnd(3, 4, seed=1)}),
    "softmax": (lambda t, v: weighted(ad.softmax(v["x"], axis=1)), {"x": rnd(3, 5, lo=-2, hi=2)}),
    "layer_norm": (lambda t, v: weighted(ad.layer_norm(v["x"], v["g"], v["b"])),
                   {"x": rnd(3, 6), "g": rnd(6, seed=1, lo=0.5, hi=1.5), "b": rnd(6, seed=2)}),
    "smooth_l1": (lambda t, v: weighted(ad.smooth_l1(v["x"])), {"x": np.array([[-2.0, -0.4, 0.3, 1.7]])}),
    "pseudo_huber_rows": (lambda t, v: weighted(ad.pseudo_huber_rows(v["x"], 0.3)), {"x": rnd(3, 4)}),
    "expand_rows": (lambda t, v: weighted(ad.expand_rows(v["x"], 3)), {"x": rnd(2, 4)}),
    "cumsum": (lambda t, v: weighted(ad.cumsum(v["x"], axis=1)), {"x": rnd(2, 5, 3)}),
    "neg_rsub": (lambda t, v: weighted(2.0 - (-v["x"])), {"x": rnd(3, 4)}),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient(name):
    build, inputs = OPS[name]
    assert fd_check(build, inputs) <= TOL


def test_half_squared_norm_gradient_is_w():
    w = rnd(7)
    tape = ad.Tape()
    v = tape.param("w", w)
    g = tape.grad(ad.sum_(ad.square(v)) * 0.5)["w"]
    assert np.allclose(g, w, rtol=0, atol=1e-15)


def test_constant_has_zero_gradient():
    tape = ad.Tape()
    w = tape.param("w", rnd(3))
    loss = ad.sum_(tape.const(np.ones(3)) * 2.0)
    assert np.array_equal(tape.grad(loss)["w"], np.zeros(3))
    # unused parameters get zeros too
    loss2 = ad.sum_(ad.square(w))
    assert set(tape.grad(loss2)) == {"w"}


def test_stop_gradient_blocks_flow():
    tape = ad.Tape()
    w = tape.param("w", rnd(3))
    loss = ad.sum_(ad.stop_gradient(w) * w)
    assert np.allclose(tape.grad(loss)["w"], w.value)


def test_ste_gradient_is_tanh_derivative():
    rng = np.random.default_rng(0)
    x = rng.normal(size=2000)
    R = rng.normal(size=2000)
    for level in (1, 2, 256, 2048):
        tape = ad.Tape()
        v = tape.param("x", x)
        g = tape.grad(ad.sum_(ad.ste_quantize(v, level) * R))["x"]
        expect = R * (1.0 - np.tanh(x) ** 2)
        assert np.max(np.abs(g - expect) / np.abs(expect)) <= 1e-6


def test_grad_errors():
    t1, t2 = ad.Tape(), ad.Tape()
    a = t1.param("a", rnd(2))
    with pytest.raises(ValueError):
        t2.grad(ad.sum_(a))
    with pytest.raises(ValueError):
        t1.grad(a)
    with pytest.raises(KeyError):
        t1.grad(ad.sum_(a), wrt=["nope"])
