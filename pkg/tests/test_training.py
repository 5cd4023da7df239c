import json

import numpy as np
import pytest

from cfnet import autodiff as ad
from cfnet import channel, system, training
from cfnet.channel import ChannelGenConfig, generate_dataset, place_nodes, slice_local
from cfnet.policy import PolicyModel, PolicyNetworkSpec
from cfnet.training import (AlignmentError, Bus, BusMessage, ProtocolError, TrainConfig,
                            aggregate_beta, train_cmtssl, train_dmtssl)


def dataset(B=2, I=4, N=2, M_t=2, M_r=2, count=200, seed=3):
    topo = place_nodes(B, I, 250.0, seed)
    return generate_dataset(topo, ChannelGenConfig(seed=seed), count, N, M_t, M_r)


@pytest.fixture(scope="module")
def tiny():
    sys_ = system.SystemConfig(B=2, N=2, I=4, M_t=2, M_r=2)
    return sys_, dataset()


def locals_of(ds):
    return [slice_local(ds, b) for b in range(ds.dims[0])]


# --- beta aggregation ------------------------------------------------------------

def test_aggregate_beta_examples():
    a = np.full(7, 0.2)
    b = np.full(7, 0.6)
    assert np.allclose(aggregate_beta([a, b], [1, 1]), 0.4)
    assert np.array_equal(aggregate_beta([a]), a)
    assert np.allclose(aggregate_beta([b, b, b]), b)
    assert np.allclose(aggregate_beta([np.full(7, 0.2), np.full(7, 0.4)]), 0.3)
    with pytest.raises(ValueError):
        aggregate_beta([a, np.ones(6)])
    with pytest.raises(ValueError):
        aggregate_beta([a, b], [1, 0])
    with pytest.raises(ValueError):
        aggregate_beta([a, b], [1])


def test_aggregate_beta_on_tape_matches_arrays(rng):
    vals = [rng.random(5) for _ in range(3)]
    tape = ad.Tape()
    leaves = [tape.leaf(v) for v in vals]
    out = aggregate_beta(leaves, [1.0, 2.0, 0.5])
    assert np.allclose(out.value, aggregate_beta(vals, [1.0, 2.0, 0.5]), rtol=1e-15)
    tape.backward(ad.sum_(out))
    assert np.allclose(leaves[1].grad, 2.0 / 3)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(scheme="S3")
    assert TrainConfig().lr_for(False) == 1e-2 and TrainConfig().lr_for(True) == 1e-3


# --- CMTSSL ------------------------------------------------------------------------

def test_zero_epochs_returns_initial_model(tiny):
    sys_, ds = tiny
    res = train_cmtssl(ds, TrainConfig(epochs=0, seed=5), sys_)
    ref = PolicyModel(PolicyNetworkSpec.centralized(sys_), training._init_rng(5, 0))
    assert res.steps == 0 and res.log == []
    for k in ref.params:
        assert np.array_equal(res.models[0].params[k], ref.params[k])


def test_tiny_run_descends(tiny):
    sys_, ds = tiny
    res = train_cmtssl(ds, TrainConfig(epochs=2, batch=10, scheme="S2", seed=0), sys_)
    losses = [r["joint_loss"] for r in res.log]
    assert len(losses) == 40
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


def test_cmtssl_deterministic(tiny):
    sys_, ds = tiny
    cfg = TrainConfig(epochs=1, batch=50, seed=2, eval_every=2)
    a = train_cmtssl(ds, cfg, sys_)
    b = train_cmtssl(ds, cfg, sys_)
    strip = lambda log: [{k: v for k, v in r.items() if k != "wall_ms"} for r in log]  # noqa: E731
    assert strip(a.log) == strip(b.log) and a.evals == b.evals
    assert set(a.log[0]) == {"step", "epoch", "joint_loss", "f_mean", "g_violation_frac", "l_abs_mean", "wall_ms"}


def test_dataset_dims_checked(tiny):
    sys_, ds = tiny
    with pytest.raises(ValueError, match="dims"):
        train_cmtssl(ds, TrainConfig(epochs=1), sys_.replace(I=3))


# --- DMTSSL --------------------------------------------------------------------------

def test_dmtssl_matches_monolithic_reference(tiny):
    sys_, ds = tiny
    cfg = TrainConfig(epochs=1, batch=20, scheme="S1", seed=1)
    loc = locals_of(ds)
    workers = training.make_workers(loc, sys_, cfg)
    coord = training.Coordinator(sys_, cfg.scheme, cfg.hyper)
    bus = Bus(sys_.B)
    rng = np.random.default_rng(0)
    for step in range(1, 4):
        idx = np.sort(rng.choice(len(ds), 20, replace=False))
        ref_loss, ref = training.monolithic_gradients([wk.model for wk in workers], [x[idx] for x in loc],
                                                      sys_, cfg.scheme, cfg.hyper)
        fb = training.dmtssl_step(step, idx, workers, coord, bus, apply_update=False)
        assert fb.payload["loss"] == pytest.approx(ref_loss, rel=1e-12)
        for wk, g_ref in zip(workers, ref):
            got = wk.output_grads(fb)
            for k in g_ref:
                assert np.allclose(got[k], g_ref[k], rtol=0, atol=1e-9 * max(1.0, np.max(np.abs(g_ref[k]))))
            wk.model.params = {k: v - 1e-3 * got[k] for k, v in wk.model.params.items()}


def test_single_sbs_reproduces_cmtssl():
    sys_ = system.SystemConfig(B=1, N=2, I=3, M_t=2, M_r=2)
    ds = dataset(B=1, I=3, count=60)
    cfg = TrainConfig(epochs=2, batch=20, scheme="S2", seed=4, lr=1e-3)
    c = train_cmtssl(ds, cfg, sys_)
    d = train_dmtssl(locals_of(ds), cfg, sys_)
    assert [r["joint_loss"] for r in c.log] == [r["joint_loss"] for r in d.log]


def test_bus_round_structure(tiny, tmp_path):
    sys_, ds = tiny
    res = train_dmtssl(locals_of(ds), TrainConfig(epochs=1, batch=50, seed=0), sys_,
                       trace_path=tmp_path / "bus.jsonl")
    recs = [json.loads(x) for x in (tmp_path / "bus.jsonl").read_text().splitlines()]
    assert len(recs) == res.steps * (sys_.B + 2)
    for s in range(1, res.steps + 1):
        rnd = [r for r in recs if r["step"] == s]
        assert [r["kind"] for r in rnd] == ["INDEX_BROADCAST", "UPLOAD", "UPLOAD", "LOSS_FEEDBACK"]
        assert sorted(r["b"] for r in rnd if r["kind"] == "UPLOAD") == [0, 1]
        assert all(r["sample_ids"] == rnd[0]["sample_ids"] for r in rnd if r["kind"] == "UPLOAD")


def test_protocol_violation_detected():
    bus = Bus(2)
    bus.send(BusMessage("INDEX_BROADCAST", 1, {"sample_ids": [0]}))
    bus.send(BusMessage("UPLOAD", 1, {"b": 0}))
    bus.send(BusMessage("LOSS_FEEDBACK", 1, {"loss": 0.0}))
    with pytest.raises(ProtocolError, match="UPLOAD"):
        bus.check_round(1)
    bus2 = Bus(1)
    bus2.send(BusMessage("UPLOAD", 3, {"b": 0}))
    with pytest.raises(ProtocolError):
        bus2.check_round(3)


def test_misaligned_local_datasets(tiny):
    sys_, ds = tiny
    loc = locals_of(ds)
    with pytest.raises(AlignmentError):
        train_dmtssl([loc[0], loc[1][:-1]], TrainConfig(epochs=1), sys_)
    with pytest.raises(AlignmentError):
        train_dmtssl(loc[:1], TrainConfig(epochs=1), sys_)


def test_dmtssl_thread_invariance(tiny, monkeypatch):
    sys_, ds = tiny
    cfg = TrainConfig(epochs=1, batch=50, seed=7)
    runs = []
    for threads in ("1", "3"):
        monkeypatch.setenv("CFNET_THREADS", threads)
        res = train_dmtssl(locals_of(ds), cfg, sys_)
        runs.append(([r["joint_loss"] for r in res.log], [m.params for m in res.models]))
    assert runs[0][0] == runs[1][0]
    for pa, pb in zip(runs[0][1], runs[1][1]):
        assert all(np.array_equal(pa[k], pb[k]) for k in pa)


# --- DATL -------------------------------------------------------------------------------

def test_datl_nearest_examples(tiny):
    sys_, _ = tiny
    spec = PolicyNetworkSpec.local(sys_)
    models = [PolicyModel(spec, np.random.default_rng(b)) for b in range(3)]
    pos = [(10, 0), (3, 4), (6, 8)]
    before = ad.backward_calls()
    model, b_star = training.datl_transfer(models, pos, (0, 0))
    assert b_star == 1  # 0-based index of the SBS at distance 5
    assert ad.backward_calls() == before
    assert training.datl_transfer(models, pos, (10, 0))[1] == 0
    assert training.nearest_sbs([(1, 0), (-1, 0)], (0, 0)) == 0  # tie -> lowest index
    for k in model.params:
        assert np.array_equal(model.params[k], models[1].params[k])
        assert model.params[k] is not models[1].params[k]
    with pytest.raises(ValueError):
        training.datl_transfer([], [], (0, 0))


# --- evaluation ---------------------------------------------------------------------------

def test_evaluation_pure_and_sign_consistent(tiny):
    sys_, ds = tiny
    model = PolicyModel(PolicyNetworkSpec.centralized(sys_), np.random.default_rng(0))
    test = ds.subset(slice(0, 30))
    a = training.evaluate_policy(model, test, sys_)
    b = training.evaluate_policy(model, test, sys_)
    assert a == b
    assert a["f_mean"] == -a["mean_weighted_sum_rate"]
    w, v = training.policy_decisions(model, test.coeffs)
    f, _, _ = system.task_values_batch(test.coeffs, w, v, sys_)
    assert np.mean(f) == pytest.approx(a["f_mean"], rel=1e-12)


def test_all_zero_allocation_metrics(tiny):
    sys_, ds = tiny
    H = ds.coeffs[:10]
    w = np.ones(H.shape[:-1], dtype=complex)
    m = training.evaluate_decisions(H, w, np.zeros(H.shape[:4]), sys_)
    assert m["mean_weighted_sum_rate"] == 0.0 and m["rate_violation_frac"] == 1.0


def test_convergence_indicators():
    steady = [{"joint_loss": 5.0 - 0.01 * k} for k in range(100)]
    assert training.convergence_indicators(steady)["converged"]
    diverging = [{"joint_loss": -10.0 * 1.5**k} for k in range(40)]
    assert not training.convergence_indicators(diverging)["converged"]
    bad = [{"joint_loss": float("nan")}] * 4
    assert training.convergence_indicators(bad)["nonfinite_steps"] == 4
