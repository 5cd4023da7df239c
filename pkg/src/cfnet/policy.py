"""Dense policy network: 512/1024/512 FC+BN+ReLU trunk and a sigmoid head.

Raw head outputs are partitioned as [w block | v-bar block | beta block]:
    w     : 2 * Bl * N * I * Mt entries, order [b][n][i][t][re, im]
    v-bar : Bl * N * I entries, order [b][n][i]
    beta  : I + B + 1 entries, order (beta0, beta1_1..I, beta2_1..B)
where Bl = B for the centralized model and 1 for a per-SBS model.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .system import SystemConfig

DECISION_MODES = ("threshold", "per_subcarrier_argmax")


@dataclass
class OutputMapping:
    w_scale: float
    beta_floor: float = 1e-3

    def __post_init__(self):
        if self.w_scale <= 0:
            raise ValueError("w_scale must be positive")
        if not 0 < self.beta_floor < 0.5:
            raise ValueError("beta_floor must lie in (0, 0.5)")

    @classmethod
    def for_system(cls, sys: SystemConfig, c: float = 2.0, beta_floor: float = 1e-3) -> "OutputMapping":
        return cls(c * math.sqrt(sys.p_max / (sys.N * sys.I * sys.M_t)), beta_floor)


@dataclass
class PolicyNetworkSpec:
    n_blocks: int  # SBS blocks produced by this model (B or 1)
    N: int
    I: int
    M_t: int
    M_r: int
    K: int
    mapping: OutputMapping
    hidden: tuple = (512, 1024, 512)
    decision_mode: str = "threshold"
    straight_through: bool = True

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.decision_mode not in DECISION_MODES:
            raise ValueError(f"decision_mode must be one of {DECISION_MODES}")
        if isinstance(self.mapping, dict):
            self.mapping = OutputMapping(**self.mapping)

    @classmethod
    def centralized(cls, sys: SystemConfig, **kw) -> "PolicyNetworkSpec":
        mapping = kw.pop("mapping", None) or OutputMapping.for_system(sys)
        return cls(sys.B, sys.N, sys.I, sys.M_t, sys.M_r, sys.K, mapping, **kw)

    @classmethod
    def local(cls, sys: SystemConfig, **kw) -> "PolicyNetworkSpec":
        mapping = kw.pop("mapping", None) or OutputMapping.for_system(sys)
        return cls(1, sys.N, sys.I, sys.M_t, sys.M_r, sys.K, mapping, **kw)

    @property
    def input_dim(self) -> int:
        return 2 * self.n_blocks * self.N * self.I * self.M_t * self.M_r

    @property
    def w_size(self) -> int:
        return 2 * self.n_blocks * self.N * self.I * self.M_t

    @property
    def v_size(self) -> int:
        return self.n_blocks * self.N * self.I

    @property
    def output_dim(self) -> int:
        return self.w_size + self.v_size + self.K

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden, self.output_dim]
        return list(zip(dims[:-1], dims[1:]))

    def flops(self) -> int:
        """2 x multiply-accumulates of the dense layers for one forward pass."""
        return 2 * sum(a * b for a, b in self.layer_dims())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["input_dim"] = self.input_dim
        d["output_dim"] = self.output_dim
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyNetworkSpec":
        d = {k: v for k, v in d.items() if k not in ("input_dim", "output_dim")}
        return cls(**d)


def flatten_channel(H, local: bool = False) -> np.ndarray:
    """Interleave (re, im) of the trailing [b][n][i][tx][rx] (or [n][i][tx][rx]) axes."""
    H = np.asarray(H)
    nd = 4 if local else 5
    lead = H.shape[:H.ndim - nd]
    return np.stack([H.real, H.imag], axis=-1).reshape(*lead, -1)


def unflatten_channel(x, dims) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    lead = x.shape[:-1]
    pairs = x.reshape(*lead, *dims, 2)
    return pairs[..., 0] + 1j * pairs[..., 1]


def decision_layer(vbar, mode: str = "threshold") -> np.ndarray:
    """Binarize relaxed gates; argmax mode is one-hot over users per (b, n) (last axis)."""
    vbar = np.asarray(vbar, dtype=float)
    if mode == "threshold":
        return (vbar >= 0.5).astype(float)
    if mode == "per_subcarrier_argmax":
        idx = np.argmax(vbar, axis=-1)  # first maximum wins ties
        out = np.zeros_like(vbar)
        np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
        return out
    raise ValueError(f"unknown decision mode {mode!r}")


class PolicyModel:
    """Parameters, batchnorm buffers and the input scale of one policy network."""

    def __init__(self, spec: PolicyNetworkSpec, rng: np.random.Generator | None = None,
                 input_scale: float = 1.0):
        self.spec = spec
        self.input_scale = float(input_scale)
        self.params: dict[str, np.ndarray] = {}
        self.bn: list[ad.BatchNormState] = []
        rng = rng if rng is not None else np.random.default_rng(0)
        for k, (fan_in, fan_out) in enumerate(spec.layer_dims()):
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            self.params[f"W{k}"] = rng.uniform(-lim, lim, size=(fan_in, fan_out))
            self.params[f"b{k}"] = np.zeros(fan_out)
            if k < len(spec.hidden):
                self.params[f"gamma{k}"] = np.ones(fan_out)
                self.params[f"shift{k}"] = np.zeros(fan_out)
                self.bn.append(ad.BatchNormState(np.zeros(fan_out), np.ones(fan_out)))

    def copy(self) -> "PolicyModel":
        return copy.deepcopy(self)

    # tensors persisted in checkpoints
    def state_tensors(self) -> dict:
        out = {k: v.copy() for k, v in self.params.items()}
        for k, st in enumerate(self.bn):
            out[f"running_mean{k}"] = st.running_mean.copy()
            out[f"running_var{k}"] = st.running_var.copy()
        out["input_scale"] = np.array([self.input_scale])
        return out

    def load_state_tensors(self, tensors: dict) -> None:
        for k in self.params:
            if tensors[k].shape != self.params[k].shape:
                raise ValueError(f"checkpoint tensor {k} has shape {tensors[k].shape}, "
                                 f"expected {self.params[k].shape}")
            self.params[k] = tensors[k].copy()
        for k, st in enumerate(self.bn):
            st.running_mean = tensors[f"running_mean{k}"].copy()
            st.running_var = tensors[f"running_var{k}"].copy()
        self.input_scale = float(tensors["input_scale"][0])

    def save(self, path) -> None:
        path = Path(path)
        ad.save_tensors(path, self.state_tensors())
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(self.spec.to_dict(), indent=2))

    @classmethod
    def load(cls, path, expect: PolicyNetworkSpec | None = None) -> "PolicyModel":
        path = Path(path)
        spec = PolicyNetworkSpec.from_dict(json.loads(path.with_suffix(path.suffix + ".json").read_text()))
        if expect is not None and (spec.input_dim, spec.output_dim) != (expect.input_dim, expect.output_dim):
            raise ValueError(f"checkpoint dims {(spec.input_dim, spec.output_dim)} do not match "
                             f"expected {(expect.input_dim, expect.output_dim)}")
        model = cls(spec)
        model.load_state_tensors(ad.load_tensors(path))
        return model


@dataclass
class PolicyOutput:
    w: ad.Var  # (S, Bl, N, I, Mt, 2)
    vbar: ad.Var  # (S, Bl, N, I)
    v: ad.Var  # binarized gates
    beta: ad.Var  # (S, K)
    param_leaves: dict = field(default_factory=dict)


def trunk(model: PolicyModel, tape: ad.Tape, x: np.ndarray, train: bool):
    """Run the dense trunk and sigmoid head; returns (sigmoid output Var, parameter leaves)."""
    leaves = {k: tape.leaf(v, name=k) for k, v in model.params.items()}
    h = tape.leaf(np.asarray(x, dtype=float) * model.input_scale, name="input")
    n_hidden = len(model.spec.hidden)
    for k in range(n_hidden):
        h = ad.affine(h, leaves[f"W{k}"], leaves[f"b{k}"])
        h = ad.batchnorm(h, leaves[f"gamma{k}"], leaves[f"shift{k}"], model.bn[k], train=train)
        h = ad.relu(h)
    h = ad.affine(h, leaves[f"W{n_hidden}"], leaves[f"b{n_hidden}"])
    return ad.sigmoid(h), leaves


def map_outputs(s: ad.Var, spec: PolicyNetworkSpec):
    """Split the sigmoid head into beamformers, relaxed gates and loss weights."""
    S = s.shape[0]
    ws, vs = spec.w_size, spec.v_size
    m = spec.mapping
    w = ad.reshape(ad.mul(ad.sub(ad.mul(s[:, :ws], 2.0), 1.0), m.w_scale),
                   (S, spec.n_blocks, spec.N, spec.I, spec.M_t, 2))
    vbar = ad.reshape(s[:, ws:ws + vs], (S, spec.n_blocks, spec.N, spec.I))
    beta = ad.clip_min(s[:, ws + vs:], m.beta_floor)
    return w, vbar, beta


def decide(vbar: ad.Var, spec: PolicyNetworkSpec) -> ad.Var:
    fn = lambda x: decision_layer(x, spec.decision_mode)  # noqa: E731
    if spec.straight_through:
        return ad.straight_through(vbar, fn)
    return vbar.tape.leaf(fn(vbar.value), name="v")


def forward_policy(model: PolicyModel, tape: ad.Tape, x_flat: np.ndarray, train: bool = True) -> PolicyOutput:
    x_flat = np.atleast_2d(x_flat)
    if x_flat.shape[-1] != model.spec.input_dim:
        raise ValueError(f"input has {x_flat.shape[-1]} features, model expects {model.spec.input_dim}")
    s, leaves = trunk(model, tape, x_flat, train)
    w, vbar, beta = map_outputs(s, model.spec)
    return PolicyOutput(w, vbar, decide(vbar, model.spec), beta, leaves)


def infer(model: PolicyModel, x_flat: np.ndarray):
    """Eval-mode forward without keeping a tape: complex w, binary v, relaxed v-bar, beta."""
    tape = ad.Tape()
    out = forward_policy(model, tape, x_flat, train=False)
    tape.release()
    w = out.w.value[..., 0] + 1j * out.w.value[..., 1]
    return w, out.v.value, out.vbar.value, out.beta.value
