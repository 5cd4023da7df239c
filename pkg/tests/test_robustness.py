import numpy as np
import pytest
from hypothesis import given, strategies as st

from cfnet import robustness as rb
from cfnet.losses import LossHyper, el


def test_softmax_examples():
    assert np.allclose(rb.softmax([0.0, 0.0]), [0.5, 0.5])
    assert np.allclose(rb.softmax([1000.0, 1000.0]), [0.5, 0.5])
    assert np.allclose(rb.softmax([np.log(1), np.log(3)]), [0.25, 0.75])


def test_corruption_identity_and_rate():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 5, 100_000)
    assert np.array_equal(rb.corrupt_symmetric(labels, 0.0, 5, rng), labels)
    noisy = rb.corrupt_symmetric(labels, 0.3, 5, rng)
    assert abs(np.mean(noisy != labels) - 0.3) < 0.01
    # flipped labels are uniform over the other classes
    moved = (noisy - labels)[noisy != labels] % 5
    counts = np.bincount(moved, minlength=5)[1:] / moved.size
    assert np.allclose(counts, 0.25, atol=0.01)


@given(st.integers(0, 2**31), st.floats(0.01, 0.79))
def test_flipped_labels_differ(seed, eta):
    labels = np.random.default_rng(seed).integers(0, 5, 500)
    noisy = rb.corrupt_symmetric(labels, eta, 5, np.random.default_rng(seed + 1))
    flip = np.random.default_rng(seed + 1).random(500) < eta  # replay the flip draws
    assert np.all(noisy[flip] != labels[flip])
    assert np.array_equal(noisy[~flip], labels[~flip])
    assert noisy.min() >= 0 and noisy.max() < 5


def test_corruption_bound():
    with pytest.raises(ValueError):
        rb.corrupt_symmetric([0, 1], 0.8, 5, np.random.default_rng(0))
    with pytest.raises(ValueError):
        rb.corrupt_symmetric([0, 1], -0.1, 5, np.random.default_rng(0))


def test_residual_loss_examples():
    assert rb.mae_residual_loss(np.array([1.0, 0.0]), 0) == pytest.approx(1.0)
    assert rb.mae_residual_loss(np.array([1.0, 0.0]), 1) == pytest.approx(3.0)


def test_symmetry_constants_closed_form():
    for Z in (2, 5, 10):
        assert rb.symmetry_constant("el", Z) == pytest.approx(3 * Z - 2)
        assert rb.symmetry_constant("nfl", Z) == pytest.approx(2 * Z - 2 + 2 * Z)
    assert rb.symmetry_constant("el", 5, LossHyper(x2=-1.0)) == pytest.approx(np.exp(-1) * (5 * 4 - 2))


@pytest.mark.parametrize("loss", ["el", "nfl"])
@pytest.mark.parametrize("Z", [2, 5, 10])
def test_symmetry_sum_any_probability_vector(loss, Z):
    rng = np.random.default_rng(Z)
    fn = rb.loss_kernel(loss)[0]
    u = rb.softmax(3 * rng.standard_normal((1000, Z)))
    sums = np.sum(fn(2 - 2 * u), axis=-1)
    assert np.max(np.abs(sums - rb.symmetry_constant(loss, Z))) < 1e-9


def test_empirical_risk_examples():
    class Const:
        def __call__(self, x):
            return np.tile([1.0, 0.0], (len(x), 1))

    feats = np.zeros((4, 2))
    assert rb.empirical_risk(Const(), feats, [0, 0, 0, 0]) == pytest.approx(1.0)
    r1 = rb.empirical_risk(Const(), feats, [0, 1, 0, 1])
    r2 = rb.empirical_risk(Const(), np.tile(feats, (2, 1)), [0, 1, 0, 1] * 2)
    assert r1 == r2 == pytest.approx(2.0)
    with pytest.raises(ValueError):
        rb.empirical_risk(Const(), feats[:0], [])


def test_risk_identity_on_frozen_model():
    rng = np.random.default_rng(1)
    data = rb.make_blobs(5, 20_000, rng)
    model = rb.SoftmaxClassifier(5, rng=rng)
    for loss in ("el", "nfl"):
        assert rb.risk_identity_residual(model, data, 0.4, loss, np.random.default_rng(2)) < 0.02


def test_experiment_reproducible_and_clean_column():
    kw = dict(Z=3, etas=(0.0, 0.3), loss_list=("el",), n_train=300, n_test=300, n_risk=2000, epochs=3)
    a = rb.run_noise_tolerance_experiment(seed=4, **kw)
    b = rb.run_noise_tolerance_experiment(seed=4, **kw)
    assert a == b
    clean = rb.run_noise_tolerance_experiment(seed=4, **{**kw, "etas": (0.0,)})
    assert clean[0] == a[0]
    with pytest.raises(ValueError):
        rb.run_noise_tolerance_experiment(Z=3, etas=(0.7,))


def test_report_csv(tmp_path):
    rows = [{"loss": "el", "eta": 0.0, "clean_test_acc": 1.0, "noisy_train_risk": 1.2, "identity_residual": 0.0}]
    rb.write_report_csv(rows, tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == \
        "loss,eta,clean_test_acc,noisy_train_risk,identity_residual"


def test_el_default_is_linear_on_residual_range():
    x = np.linspace(0, 2, 11)
    assert np.allclose(el(x, 0.0), x + 1)
