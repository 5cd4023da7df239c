import numpy as np
import pytest
from hypothesis import given, strategies as st

from cfnet import baselines, system
from cfnet.baselines import flops_gsa_zfbf, flops_rsa_zfbf
from conftest import crandn

DESK = system.SystemConfig(B=3, N=4, I=10, M_t=4, M_r=2)


def test_flops_closed_forms():
    r = flops_rsa_zfbf(DESK)
    g = flops_gsa_zfbf(DESK)
    assert r.total == 817_920 and g.total == 835_200
    assert r.total == sum(r.terms.values())
    one = system.SystemConfig(B=1, N=1, I=1, M_t=1, M_r=1)
    assert flops_rsa_zfbf(one).total == 30


def test_flops_term_by_term():
    # independent evaluation: 6BN[2IMtMr + (2Mt+IMr)(IMr)^2], 6BNI[2MtMr + (2I+1)MtMr^2 + (I^2+1)Mr^3]
    for B, N, I, Mt, Mr in [(3, 4, 10, 4, 2), (2, 5, 7, 3, 1), (1, 1, 2, 8, 4)]:
        s = system.SystemConfig(B=B, N=N, I=I, M_t=Mt, M_r=Mr)
        assert flops_rsa_zfbf(s).total == 6 * B * N * (2 * I * Mt * Mr + (2 * Mt + I * Mr) * (I * Mr) ** 2)
        assert flops_gsa_zfbf(s).total == 6 * B * N * I * (2 * Mt * Mr + (2 * I + 1) * Mt * Mr**2
                                                          + (I**2 + 1) * Mr**3)


@given(st.sampled_from(["B", "N", "I", "M_t", "M_r"]), st.integers(1, 6), st.integers(1, 6))
def test_flops_monotone(axis, lo, step):
    a = DESK.replace(**{axis: lo})
    b = DESK.replace(**{axis: lo + step})
    for fn in (flops_rsa_zfbf, flops_gsa_zfbf):
        assert fn(b).total >= fn(a).total


def test_flops_linear_in_b_and_n():
    for axis in ("B", "N"):
        vals = [flops_rsa_zfbf(DESK.replace(**{axis: k})).total for k in (1, 2, 3)]
        assert vals[2] - vals[1] == vals[1] - vals[0] == vals[0]


@pytest.fixture
def H(rng):
    return crandn(rng, 3, 4, 10, 4, 2)


def test_rsa_structure_and_power(H, rng):
    y = baselines.rsa_zfbf(H, DESK, np.random.default_rng(1))
    assert np.all(y.v.sum(axis=-1) == 1)
    for b in range(3):
        assert system.transmit_power(y, b) == pytest.approx(DESK.p_max, abs=1e-9)
    per_sub = np.sum(np.abs(y.w) ** 2 * y.v[..., None], axis=(2, 3))
    assert np.allclose(per_sub, DESK.p_max / DESK.N, atol=1e-9)
    y2 = baselines.rsa_zfbf(H, DESK, np.random.default_rng(1))
    assert np.array_equal(y.v, y2.v) and np.array_equal(y.w, y2.w)


def test_gsa_picks_strongest(rng):
    H = crandn(rng, 2, 3, 2, 4, 2)
    H[:, :, 1] = 2.0 * H[:, :, 0]
    y = baselines.gsa_zfbf(H, DESK.replace(B=2, N=3, I=2))
    assert np.all(y.v[..., 1] == 1) and np.all(y.v[..., 0] == 0)


def test_gsa_consumes_no_rng(H):
    state = np.random.get_state()[1].copy()
    a = baselines.gsa_zfbf(H, DESK)
    b = baselines.gsa_zfbf(H, DESK)
    assert np.array_equal(a.w, b.w)
    assert np.array_equal(np.random.get_state()[1], state)


def test_single_user_rsa_equals_gsa(rng):
    H = crandn(rng, 3, 4, 1, 4, 2)
    s = DESK.replace(I=1)
    r = baselines.rsa_zfbf(H, s, np.random.default_rng(9))
    g = baselines.gsa_zfbf(H, s)
    assert np.array_equal(r.v, g.v) and np.allclose(r.w, g.w)


def leakage(hj, w):
    return np.linalg.norm(np.conj(hj.T) @ w) / (np.linalg.norm(w) * np.linalg.norm(hj))


def test_zf_nulls_cross_user_leakage(rng):
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 3))
        mt = int(rng.integers(2 * k, 7))
        chans = [crandn(rng, mt, 2) for _ in range(k)]
        beams = baselines.zf_precoders(chans, 1.0)
        for i in range(k):
            for j in range(k):
                if i != j:
                    worst = max(worst, leakage(chans[j], beams[i]))
    assert worst < 1e-8


def test_infeasible_zf_falls_back_and_counts(rng):
    stats = {}
    chans = [crandn(rng, 2, 2) for _ in range(2)]  # 4 streams > 2 antennas
    beams = baselines.zf_precoders(chans, 2.0, stats)
    assert stats["fallbacks"] == 1
    assert sum(np.linalg.norm(b) ** 2 for b in beams) == pytest.approx(2.0, abs=1e-12)


def test_baseline_decisions_stack(H):
    Hs = np.stack([H, H])
    w, v = baselines.baseline_decisions(Hs, DESK, "gsa_zfbf")
    assert w.shape == (2, 3, 4, 10, 4) and v.shape == (2, 3, 4, 10)
    with pytest.raises(ValueError):
        baselines.baseline_decisions(Hs, DESK, "mmse")
