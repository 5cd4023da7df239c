import logging

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cfnet import autodiff as ad


def grad_of(fn, *values):
    tape = ad.Tape()
    leaves = [tape.leaf(np.array(v, dtype=float)) for v in values]
    out = fn(*leaves)
    tape.backward(out)
    return [leaf.grad for leaf in leaves]


def check(fn, *values, tol=1e-6):
    analytic = grad_of(lambda *xs: ad.sum_(fn(*xs)), *values)
    for k, v in enumerate(values):
        def scalar(x, k=k):
            args = list(values)
            args[k] = x
            tape = ad.Tape()
            return float(np.sum(fn(*[tape.leaf(np.array(a, float)) for a in args]).value))
        num = ad.numerical_grad(scalar, np.array(v, float))
        assert ad.relative_error(analytic[k], num) < tol


def test_scalar_examples():
    assert grad_of(lambda x: ad.square(x), 3.0)[0] == pytest.approx(6.0)
    g = grad_of(lambda x: ad.sum_(ad.sigmoid(x)), np.zeros(4))[0]
    assert np.allclose(g, 0.25)
    tape = ad.Tape()
    assert ad.relu(tape.leaf(np.array([-1.0, 2.0]))).value.tolist() == [0.0, 2.0]
    assert ad.sigmoid(tape.leaf(np.zeros(1))).value[0] == 0.5


def test_primitive_gradchecks():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 3))
    W = rng.standard_normal((3, 5))
    b = rng.standard_normal(5)
    check(ad.affine, x, W, b)
    check(lambda a: ad.relu(a), x + 0.05 * np.sign(x))
    check(ad.sigmoid, x)
    check(ad.softmax, x)
    check(ad.exp, x)
    check(ad.log_, np.abs(x) + 0.5)
    check(lambda a, c: ad.div(a, c), x, np.abs(x) + 1.0)
    check(lambda a, c: ad.mul(a, c), x, rng.standard_normal(3))
    check(lambda a, c: ad.sub(a, c), x, rng.standard_normal((1, 3)))
    check(lambda a: ad.reshape(a, (3, 4)), x)
    check(lambda a: a[1:, ::2], x)
    check(lambda a, c: ad.concat([a, c], axis=0), x, rng.standard_normal((2, 3)))
    check(lambda a, c: ad.matmul(a, c), x, W)
    check(lambda a: ad.mean(a, axis=0), x)
    check(lambda a: ad.clip_min(a, 0.1), x + 0.05)


def test_batchnorm_gradcheck():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((6, 4))
    gamma, beta = rng.standard_normal(4), rng.standard_normal(4)
    up = rng.standard_normal((6, 4))

    def fn(a, g, c):
        st_ = ad.BatchNormState(np.zeros(4), np.ones(4))
        return ad.mul(ad.batchnorm(a, g, c, st_, train=True), up)

    check(fn, x, gamma, beta)

    def fn_eval(a, g, c):
        st_ = ad.BatchNormState(np.full(4, 0.3), np.full(4, 2.0))
        return ad.mul(ad.batchnorm(a, g, c, st_, train=False), up)

    check(fn_eval, x, gamma, beta)


def test_batchnorm_constant_batch_and_running_stats():
    tape = ad.Tape()
    st_ = ad.BatchNormState(np.zeros(3), np.ones(3))
    out = ad.batchnorm(tape.leaf(np.full((5, 3), 7.0)), tape.leaf(np.ones(3)), tape.leaf(np.zeros(3)), st_)
    assert np.array_equal(out.value, np.zeros((5, 3)))
    assert np.allclose(st_.running_mean, 0.7)
    assert np.allclose(st_.running_var, 0.9)


def test_batchnorm_single_sample_falls_back(caplog):
    tape = ad.Tape()
    st_ = ad.BatchNormState(np.full(2, 1.0), np.full(2, 4.0))
    with caplog.at_level(logging.WARNING):
        out = ad.batchnorm(tape.leaf(np.array([[3.0, 5.0]])), tape.leaf(np.ones(2)), tape.leaf(np.zeros(2)), st_)
    assert "batch of one" in caplog.text
    assert np.allclose(out.value, (np.array([3.0, 5.0]) - 1.0) / np.sqrt(4.0 + 1e-5))
    assert np.array_equal(st_.running_mean, np.full(2, 1.0))


def test_straight_through_is_identity_backward():
    tape = ad.Tape()
    x = tape.leaf(np.array([0.2, 0.7]))
    y = ad.straight_through(x, lambda v: (v >= 0.5).astype(float))
    assert y.value.tolist() == [0.0, 1.0]
    tape.backward(ad.sum_(ad.mul(y, np.array([3.0, -2.0]))))
    assert x.grad.tolist() == [3.0, -2.0]


def test_tape_state_errors():
    tape = ad.Tape()
    x = tape.leaf(np.ones(2))
    out = ad.sum_(ad.square(x))
    with pytest.raises(ad.TapeStateError):
        tape.backward(ad.Tape().leaf(np.ones(1)))
    tape.backward(out)
    with pytest.raises(ad.TapeStateError):
        tape.backward(out)
    with pytest.raises(ad.TapeStateError):
        ad.square(x)


def test_backward_counter():
    before = ad.backward_calls()
    tape = ad.Tape()
    tape.backward(ad.sum_(tape.leaf(np.ones(2))))
    assert ad.backward_calls() == before + 1


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_adjoint_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    xv = rng.standard_normal(5)

    def f(x):
        return ad.sum_(ad.sigmoid(ad.mul(x, 2.0)))

    def g(x):
        return ad.sum_(ad.square(x))

    gf = grad_of(f, xv)[0]
    gg = grad_of(g, xv)[0]
    both = grad_of(lambda x: ad.add(ad.mul(f(x), a), ad.mul(g(x), b)), xv)[0]
    assert np.allclose(both, a * gf + b * gg, rtol=0, atol=1e-10)


def test_adam_examples():
    p = {"x": np.array([1.0, -2.0])}
    st_ = ad.AdamState(lr=0.1)
    assert ad.adam_step(p, {"x": np.zeros(2)}, st_)
    assert p["x"].tolist() == [1.0, -2.0] and st_.step == 1

    q = {"x": np.array([1.0])}
    st_ = ad.AdamState(lr=0.1)
    ad.adam_step(q, {"x": 2.0 * q["x"]}, st_)
    step = 1.0 - q["x"][0]
    assert 0 < step <= 0.1 + 1e-12
    assert step == pytest.approx(0.1, rel=1e-6)


def test_adam_skips_nonfinite():
    p = {"x": np.ones(2)}
    st_ = ad.AdamState()
    assert not ad.adam_step(p, {"x": np.array([np.nan, 1.0])}, st_)
    assert p["x"].tolist() == [1.0, 1.0] and st_.step == 0 and st_.skipped == 1


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(3)
        p = {"w": rng.standard_normal(4)}
        st_ = ad.AdamState(lr=0.05)
        for _ in range(20):
            ad.adam_step(p, {"w": np.sin(p["w"]) + p["w"] ** 3}, st_)
        return p["w"]

    assert np.array_equal(run(), run())


def test_checkpoint_roundtrip(tmp_path):
    tensors = {"W0": np.arange(6.0).reshape(2, 3), "b0": np.array([0.5]), "ü": np.array(3.25)}
    path = tmp_path / "m.cfth"
    ad.save_tensors(path, tensors)
    raw = path.read_bytes()
    assert raw[:4] == b"CFTH"
    back = ad.load_tensors(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert np.array_equal(back[k], tensors[k])
    ad.save_tensors(tmp_path / "again.cfth", back)
    assert (tmp_path / "again.cfth").read_bytes() == raw


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.cfth"
    path.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ValueError):
        ad.load_tensors(path)


def test_backward_frees_graph():
    import gc
    import weakref

    tape = ad.Tape()
    x = tape.leaf(np.ones(3))
    y = ad.sum_(ad.square(ad.relu(x)))
    ref = weakref.ref(tape)
    tape.backward(y)
    grad = x.grad
    assert np.allclose(grad, 2.0) and y.value == 3.0
    gc.disable()  # only reference counting: no cycles may survive backward
    try:
        del tape, x, y
        assert ref() is None
    finally:
        gc.enable()
