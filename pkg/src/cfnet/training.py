"""Centralized (CMTSSL) and distributed (DMTSSL) self-supervised training,
distance-aware model transfer (DATL) and policy evaluation."""
from __future__ import annotations

import json
import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses, system
from .channel import ChannelDataset, Topology, slice_local, worker_count
from .policy import PolicyModel, PolicyNetworkSpec, decision_layer, flatten_channel, forward_policy, infer
from .rate_graph import rate_graph

log = logging.getLogger(__name__)

LR_CENTRALIZED = 1e-2
LR_DISTRIBUTED = 1e-3


class AlignmentError(ValueError):
    pass


class ProtocolError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch: int = 100
    lr: float | None = None  # None: 1e-2 centralized, 1e-3 distributed
    scheme: str = "S1"
    seed: int = 0
    eval_every: int = 0
    hyper: losses.LossHyper = field(default_factory=losses.LossHyper)
    decision_mode: str = "threshold"

    def __post_init__(self):
        if isinstance(self.hyper, dict):
            self.hyper = losses.LossHyper(**self.hyper)
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.lr is not None and self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.scheme not in losses.SCHEMES:
            raise ValueError(f"scheme must be one of {losses.SCHEMES}")

    def lr_for(self, distributed: bool) -> float:
        if self.lr is not None:
            return self.lr
        return LR_DISTRIBUTED if distributed else LR_CENTRALIZED


@dataclass
class TrainResult:
    models: list  # one centralized model, or B per-SBS models
    log: list
    evals: list
    skipped_steps: int = 0
    steps: int = 0

    def write_log(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.log:
                fh.write(json.dumps(rec) + "\n")


# --- shared loss construction --------------------------------------------------

def _scheme_op(tv: ad.Var, n_users: int, scheme: str, hyper: losses.LossHyper) -> ad.Var:
    vals = tv.value
    f, g, l = vals[..., 0], vals[..., 1:1 + n_users], vals[..., 1 + n_users:]
    out = losses.stack_losses(losses.scheme_losses(f, g, l, scheme, hyper))
    d = losses.stack_losses(losses.scheme_loss_grads(f, g, l, scheme, hyper))
    return tv.tape.record(out, (tv,), lambda gr: (gr * d,), name=f"scheme_{scheme}")


def joint_objective(H, w: ad.Var, v: ad.Var, beta: ad.Var, sys: system.SystemConfig,
                    scheme: str, hyper: losses.LossHyper):
    """Mini-batch mean of the weighted joint loss; returns (loss Var, task values array)."""
    tv = rate_graph(H, w, v, sys)
    task_losses = _scheme_op(tv, sys.I, scheme, hyper)
    weighted = ad.div(task_losses, ad.mul(ad.square(beta), float(sys.K)))
    per_sample = ad.add(ad.sum_(weighted, axis=-1), ad.sum_(ad.log_(beta), axis=-1))
    return ad.mean(per_sample), tv.value


def aggregate_beta(betas, weights=None):
    """beta = (1/B) sum_b omega_b beta^b for arrays or tape variables."""
    betas = list(betas)
    nb = len(betas)
    if nb == 0:
        raise ValueError("no loss weights to aggregate")
    weights = [1.0] * nb if weights is None else list(weights)
    if len(weights) != nb:
        raise ValueError("need one aggregation weight per SBS")
    shapes = {tuple(np.shape(b.value if isinstance(b, ad.Var) else b)) for b in betas}
    if len(shapes) != 1:
        raise ValueError(f"loss-weight vectors differ in shape: {sorted(shapes)}")
    if any(wt <= 0 for wt in weights):
        raise ValueError("aggregation weights must be positive")
    if isinstance(betas[0], ad.Var):
        acc = ad.mul(betas[0], float(weights[0]))
        for b, wt in zip(betas[1:], weights[1:]):
            acc = ad.add(acc, ad.mul(b, float(wt)))
        return ad.mul(acc, 1.0 / nb)
    acc = np.asarray(betas[0], float) * weights[0]
    for b, wt in zip(betas[1:], weights[1:]):
        acc = acc + np.asarray(b, float) * wt
    return acc * (1.0 / nb)


def _record(step, epoch, loss, tv, sys, t0):
    f = tv[:, 0]
    g = tv[:, 1:1 + sys.I]
    l = tv[:, 1 + sys.I:]
    return {
        "step": step,
        "epoch": epoch,
        "joint_loss": float(loss),
        "f_mean": float(np.mean(f)),
        "g_violation_frac": float(np.mean(g > 0)),
        "l_abs_mean": float(np.mean(np.abs(l))),
        "wall_ms": round((time.perf_counter() - t0) * 1e3, 3),
    }


def _input_scale(x: np.ndarray) -> float:
    sd = float(np.std(x))
    return 1.0 / sd if sd > 0 else 1.0


def _init_rng(seed: int, b: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 0, b]))


def _batch_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 1]))


def _batches(n: int, batch: int, rng: np.random.Generator):
    """Random mini-batches without replacement; floor(n / batch) per epoch (at least one)."""
    perm = rng.permutation(n)
    steps = max(1, n // batch)
    for k in range(steps):
        yield np.sort(perm[k * batch:(k + 1) * batch])


def _split_validation(ds: ChannelDataset, val_ds):
    if val_ds is not None:
        return ds, val_ds
    n_val = max(1, len(ds) // 10)
    return ds.subset(slice(0, len(ds) - n_val)), ds.subset(slice(len(ds) - n_val, None))


def _check_dims(ds: ChannelDataset, sys: system.SystemConfig):
    if ds.dims != sys.channel_shape:
        raise ValueError(f"dataset dims {ds.dims} do not match system {sys.channel_shape}")


# --- CMTSSL -------------------------------------------------------------------

def train_cmtssl(ds: ChannelDataset, cfg: TrainConfig, sys: system.SystemConfig,
                 val_ds: ChannelDataset | None = None, spec: PolicyNetworkSpec | None = None) -> TrainResult:
    _check_dims(ds, sys)
    if cfg.eval_every:
        ds, val_ds = _split_validation(ds, val_ds)
    spec = spec or PolicyNetworkSpec.centralized(sys, decision_mode=cfg.decision_mode)
    x_all = flatten_channel(ds.coeffs)
    model = PolicyModel(spec, _init_rng(cfg.seed, 0), _input_scale(x_all))
    opt = ad.AdamState(lr=cfg.lr_for(distributed=False))
    rng = _batch_rng(cfg.seed)
    result = TrainResult([model], [], [])
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _batches(len(ds), cfg.batch, rng):
            t0 = time.perf_counter()
            tape = ad.Tape()
            out = forward_policy(model, tape, x_all[idx], train=True)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                loss, tv = joint_objective(ds.coeffs[idx], out.w, out.v, out.beta, sys, cfg.scheme, cfg.hyper)
            step += 1
            if not np.isfinite(loss.value):
                tape.release()
                result.skipped_steps += 1
                result.log.append(_record(step, epoch, loss.value, tv, sys, t0))
                continue
            tape.backward(loss)
            ad.adam_step(model.params, {k: v.grad for k, v in out.param_leaves.items()}, opt)
            result.log.append(_record(step, epoch, loss.value, tv, sys, t0))
            if cfg.eval_every and step % cfg.eval_every == 0:
                result.evals.append({"step": step, **summary_metrics(evaluate_policy(model, val_ds, sys))})
    result.steps = step
    return result


# --- DMTSSL: bus + workers ------------------------------------------------------

@dataclass
class BusMessage:
    kind: str  # INDEX_BROADCAST | UPLOAD | LOSS_FEEDBACK
    step: int
    payload: dict

    def trace_record(self) -> dict:
        rec = {"kind": self.kind, "step": self.step}
        if "b" in self.payload:
            rec["b"] = self.payload["b"]
        if "sample_ids" in self.payload:
            rec["sample_ids"] = [int(k) for k in self.payload["sample_ids"]]
        if "loss" in self.payload:
            rec["loss"] = float(self.payload["loss"])
        return rec


class Bus:
    """In-process backhaul. Keeps the full message history for protocol checks."""

    def __init__(self, n_sbs: int, keep_payloads: bool = False):
        self.n_sbs = n_sbs
        self.keep_payloads = keep_payloads
        self.messages: list[BusMessage] = []

    def send(self, msg: BusMessage) -> BusMessage:
        stored = msg if self.keep_payloads else BusMessage(msg.kind, msg.step, {
            k: v for k, v in msg.payload.items() if k in ("b", "sample_ids", "loss")})
        self.messages.append(stored)
        return msg

    def check_round(self, step: int) -> None:
        kinds = [(m.kind, m.payload.get("b")) for m in self.messages if m.step == step]
        if [k for k, _ in kinds].count("INDEX_BROADCAST") != 1 or kinds[0][0] != "INDEX_BROADCAST":
            raise ProtocolError(f"step {step}: expected exactly one leading INDEX_BROADCAST")
        uploads = [b for k, b in kinds if k == "UPLOAD"]
        if sorted(uploads) != list(range(self.n_sbs)):
            raise ProtocolError(f"step {step}: expected one UPLOAD per SBS, got {uploads}")
        if [k for k, _ in kinds].count("LOSS_FEEDBACK") != 1 or kinds[-1][0] != "LOSS_FEEDBACK":
            raise ProtocolError(f"step {step}: expected exactly one closing LOSS_FEEDBACK")

    def dump(self, path) -> None:
        with open(path, "w") as fh:
            for m in self.messages:
                fh.write(json.dumps(m.trace_record()) + "\n")


class SBSWorker:
    """Actor side: local model, local channel slice, local optimizer."""

    def __init__(self, b: int, model: PolicyModel, local_coeffs: np.ndarray, lr: float):
        self.b = b
        self.model = model
        self.local = local_coeffs
        self.x = flatten_channel(local_coeffs, local=True)
        self.opt = ad.AdamState(lr=lr)
        self._pending = None

    def on_index_broadcast(self, msg: BusMessage) -> BusMessage:
        idx = msg.payload["sample_ids"]
        tape = ad.Tape()
        out = forward_policy(self.model, tape, self.x[idx], train=True)
        self._pending = (tape, out)
        return BusMessage("UPLOAD", msg.step, {
            "b": self.b, "sample_ids": idx, "w": out.w.value, "v": out.v.value,
            "beta": out.beta.value, "H": self.local[idx]})

    def output_grads(self, msg: BusMessage):
        """Chain the coordinator's output gradients through the local tape."""
        tape, out = self._pending
        self._pending = None
        grads = msg.payload["grads"][self.b]
        tape.backward([out.w, out.v, out.beta], [grads["w"], grads["v"], grads["beta"]])
        return {k: v.grad for k, v in out.param_leaves.items()}

    def on_loss_feedback(self, msg: BusMessage) -> bool:
        return ad.adam_step(self.model.params, self.output_grads(msg), self.opt)

    def discard_pending(self) -> None:
        if self._pending is not None:
            self._pending[0].release()
            self._pending = None


class Coordinator:
    """Critic side: concatenates uploads, computes the global joint loss and its output gradients."""

    def __init__(self, sys: system.SystemConfig, scheme: str, hyper: losses.LossHyper, omega=None):
        self.sys = sys
        self.scheme = scheme
        self.hyper = hyper
        self.omega = omega

    def on_uploads(self, step: int, uploads: list[BusMessage]) -> BusMessage:
        uploads = sorted(uploads, key=lambda m: m.payload["b"])
        tape = ad.Tape()
        ws = [tape.leaf(m.payload["w"], name=f"w{m.payload['b']}") for m in uploads]
        vs = [tape.leaf(m.payload["v"], name=f"v{m.payload['b']}") for m in uploads]
        bs = [tape.leaf(m.payload["beta"], name=f"beta{m.payload['b']}") for m in uploads]
        H = np.stack([m.payload["H"] for m in uploads], axis=1)
        w = ad.concat(ws, axis=1)
        v = ad.concat(vs, axis=1)
        beta = aggregate_beta(bs, self.omega)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            loss, tv = joint_objective(H, w, v, beta, self.sys, self.scheme, self.hyper)
        grads = {}
        if np.isfinite(loss.value):
            tape.backward(loss)
            for m, wl, vl, bl in zip(uploads, ws, vs, bs):
                grads[m.payload["b"]] = {"w": wl.grad, "v": vl.grad, "beta": bl.grad}
        else:
            tape.release()
        return BusMessage("LOSS_FEEDBACK", step, {"loss": float(loss.value), "grads": grads, "tv": tv})


def _map(fn, items, workers):
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def check_alignment(local_ds) -> None:
    lens = {len(x) for x in local_ds}
    shapes = {tuple(np.shape(x)[1:]) for x in local_ds}
    if len(lens) != 1 or len(shapes) != 1:
        raise AlignmentError(f"local datasets are not aligned slices: lengths {sorted(lens)}, "
                             f"shapes {sorted(shapes)}")


def make_workers(local_ds, sys: system.SystemConfig, cfg: TrainConfig, spec: PolicyNetworkSpec | None = None):
    spec = spec or PolicyNetworkSpec.local(sys, decision_mode=cfg.decision_mode)
    workers = []
    for b, local in enumerate(local_ds):
        x = flatten_channel(local, local=True)
        model = PolicyModel(spec, _init_rng(cfg.seed, b), _input_scale(x))
        workers.append(SBSWorker(b, model, np.asarray(local), cfg.lr_for(distributed=True)))
    return workers


def dmtssl_step(step: int, idx, workers: list[SBSWorker], coord: Coordinator, bus: Bus,
                apply_update: bool = True):
    """One full bus round. Returns the LOSS_FEEDBACK message."""
    n_threads = worker_count()
    bcast = bus.send(BusMessage("INDEX_BROADCAST", step, {"sample_ids": idx}))
    uploads = [bus.send(m) for m in _map(lambda wk: wk.on_index_broadcast(bcast), workers, n_threads)]
    feedback = bus.send(coord.on_uploads(step, uploads))
    bus.check_round(step)
    if feedback.payload["grads"] and apply_update:
        _map(lambda wk: wk.on_loss_feedback(feedback), workers, n_threads)
    elif not feedback.payload["grads"]:
        for wk in workers:
            wk.discard_pending()
    return feedback


def train_dmtssl(local_ds, cfg: TrainConfig, sys: system.SystemConfig, val_ds: ChannelDataset | None = None,
                 spec: PolicyNetworkSpec | None = None, omega=None, trace_path=None) -> TrainResult:
    local_ds = [np.asarray(x) for x in local_ds]
    check_alignment(local_ds)
    if len(local_ds) != sys.B:
        raise AlignmentError(f"got {len(local_ds)} local datasets for B={sys.B}")
    if cfg.eval_every and val_ds is None:
        n_val = max(1, len(local_ds[0]) // 10)
        val_ds = ChannelDataset(np.stack([x[-n_val:] for x in local_ds], axis=1))
        local_ds = [x[:-n_val] for x in local_ds]
    workers = make_workers(local_ds, sys, cfg, spec)
    coord = Coordinator(sys, cfg.scheme, cfg.hyper, omega)
    bus = Bus(sys.B)
    rng = _batch_rng(cfg.seed)
    result = TrainResult([wk.model for wk in workers], [], [])
    step = 0
    n = len(local_ds[0])
    for epoch in range(cfg.epochs):
        for idx in _batches(n, cfg.batch, rng):
            t0 = time.perf_counter()
            step += 1
            fb = dmtssl_step(step, idx, workers, coord, bus)
            if not fb.payload["grads"]:
                result.skipped_steps += 1
            result.log.append(_record(step, epoch, fb.payload["loss"], fb.payload["tv"], sys, t0))
            if cfg.eval_every and step % cfg.eval_every == 0:
                result.evals.append({"step": step, **summary_metrics(evaluate_policy(result.models, val_ds, sys))})
    result.steps = step
    if trace_path is not None:
        bus.dump(trace_path)
    return result


def monolithic_gradients(models: list[PolicyModel], local_batches, sys: system.SystemConfig, scheme: str,
                         hyper: losses.LossHyper, omega=None):
    """Reference: all B forwards and the global loss on one tape. Models are copied (BN stats mutate)."""
    tape = ad.Tape()
    outs = []
    for model, local in zip(models, local_batches):
        outs.append(forward_policy(model.copy(), tape, flatten_channel(local, local=True), train=True))
    H = np.stack(list(local_batches), axis=1)
    w = ad.concat([o.w for o in outs], axis=1)
    v = ad.concat([o.v for o in outs], axis=1)
    beta = aggregate_beta([o.beta for o in outs], omega)
    loss, _ = joint_objective(H, w, v, beta, sys, scheme, hyper)
    tape.backward(loss)
    return float(loss.value), [{k: leaf.grad for k, leaf in o.param_leaves.items()} for o in outs]


# --- DATL ---------------------------------------------------------------------

def nearest_sbs(positions, new_pos) -> int:
    """Index of the SBS closest (2-D) to ``new_pos``; ties go to the lowest index."""
    pos = np.asarray(positions, float)[:, :2]
    d = np.sqrt(np.sum((pos - np.asarray(new_pos, float)[:2]) ** 2, axis=-1))
    return int(np.argmin(d))


def datl_transfer(models: list[PolicyModel], positions, new_pos):
    """Copy the nearest SBS's model to a new SBS. No training happens here."""
    if not models:
        raise ValueError("no trained models to transfer from")
    if isinstance(positions, Topology):
        positions = positions.sbs_positions
    if len(positions) != len(models):
        raise ValueError("need one position per model")
    b_star = nearest_sbs(positions, new_pos)
    return models[b_star].copy(), b_star


# --- evaluation -----------------------------------------------------------------

def evaluate_decisions(H, w, v, sys: system.SystemConfig) -> dict:
    """Metrics for hard decisions on a stack of channel samples."""
    r = system.rates_batch(H, w, v, sys.sigma2)
    p = system.powers_batch(w, v)
    wsr = r @ sys.alpha
    return {
        "mean_weighted_sum_rate": float(np.mean(wsr)),
        "f_mean": float(-np.mean(wsr)),
        "user_rate_mean": np.mean(r, axis=0).tolist(),
        "user_rate_quantiles": {q: float(np.quantile(r, q)) for q in (0.05, 0.5, 0.95)},
        "rate_violation_frac": float(np.mean(r < sys.r_min)),
        "sbs_power_mean": np.mean(p, axis=0).tolist(),
        "l_abs_mean": float(np.mean(np.abs(p - sys.p_max))),
        "l_abs_per_sbs": np.mean(np.abs(p - sys.p_max), axis=0).tolist(),
    }


def policy_decisions(models, H, decision_mode: str | None = None):
    """Hard (w, v) for every sample; ``models`` is one centralized model or a per-SBS list."""
    if isinstance(models, PolicyModel):
        models = [models]
    if len(models) == 1 and models[0].spec.n_blocks == H.shape[1]:
        w, _, vbar, _ = infer(models[0], flatten_channel(H))
    else:
        if len(models) != H.shape[1]:
            raise ValueError(f"{len(models)} local models for {H.shape[1]} SBSs")
        parts = [infer(m, flatten_channel(H[:, b], local=True)) for b, m in enumerate(models)]
        w = np.concatenate([p[0] for p in parts], axis=1)
        vbar = np.concatenate([p[2] for p in parts], axis=1)
    mode = decision_mode or models[0].spec.decision_mode
    return w, decision_layer(vbar, mode)


def evaluate_policy(models, test_ds: ChannelDataset, sys: system.SystemConfig,
                    decision_mode: str | None = None) -> dict:
    H = test_ds.coeffs
    w, v = policy_decisions(models, H, decision_mode)
    out = evaluate_decisions(H, w, v, sys)
    first = models if isinstance(models, PolicyModel) else models[0]
    out["flops"] = first.spec.flops()
    return out


def summary_metrics(m: dict) -> dict:
    return {k: m[k] for k in ("mean_weighted_sum_rate", "rate_violation_frac", "l_abs_mean")}


def convergence_indicators(log_records: list) -> dict:
    """Summary of a joint-loss trajectory used to flag non-convergent loss schemes."""
    losses_ = np.array([r["joint_loss"] for r in log_records], dtype=float)
    if losses_.size == 0:
        return {"steps": 0}
    finite = losses_[np.isfinite(losses_)]
    q = max(1, len(losses_) // 4)
    head, tail = losses_[:q], losses_[-q:]
    out = {
        "steps": int(losses_.size),
        "nonfinite_steps": int(losses_.size - finite.size),
        "final": float(losses_[-1]),
        "max_abs": float(np.max(np.abs(finite))) if finite.size else math.inf,
        "head_mean": float(np.mean(head)),
        "tail_mean": float(np.mean(tail)),
        "tail_std": float(np.std(tail)),
    }
    rel_tail = out["tail_std"] / max(abs(out["tail_mean"]), 1e-12)
    out["converged"] = bool(out["nonfinite_steps"] == 0 and out["tail_mean"] > -1e3
                            and out["tail_mean"] <= out["head_mean"] and rel_tail < 0.5)
    return out


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
