"""Experiment configuration, pipelines and on-disk layout.

Layout under ``output_dir``::

    data/        train.cfds, test.cfds, topology.json, manifest.json
    runs/<name>/ checkpoints, metrics.jsonl, eval.json, summary.csv, manifest.json
    sweep-<axis>/sweep.csv, manifest.json
    robustness/  report.csv, manifest.json
    gradcheck/   gradcheck.csv, manifest.json
    report/      summary.csv, plot_*.csv, report.json

Every manifest carries the effective config, its hash, the seed and library
versions. A run directory whose manifest is not marked complete is treated as
partial by :func:`report`.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import platform
from importlib import metadata
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from . import autodiff as ad
from . import baselines, channel, losses, robustness, system, training
from .policy import OutputMapping, PolicyModel, PolicyNetworkSpec, map_outputs
from .rate_graph import rate_graph

log = logging.getLogger(__name__)

TEST_OFFSET = 10**6
ALGORITHMS = ("cmtssl", "dmtssl", "rsa_zfbf", "gsa_zfbf")


# --- errors -----------------------------------------------------------------------

class HarnessError(Exception):
    category = "error"
    exit_code = 1


class ConfigError(HarnessError):
    category = "config"
    exit_code = 2

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid config:\n" + "\n".join(f"  - {p}" for p in self.problems))


class MissingInputError(HarnessError):
    category = "missing-input"
    exit_code = 3


# --- configuration ------------------------------------------------------------------

_num = {"type": "number"}
_int_pos = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "cfnet experiment config",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string", "minLength": 1},
        "sys": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "B": _int_pos, "N": _int_pos, "I": _int_pos, "M_t": _int_pos, "M_r": _int_pos,
                "noise_dbm": _num, "p_max_dbm": _num,
                "r_min": {"type": "number", "minimum": 0},
                "alpha": {"type": ["array", "null"], "items": {"type": "number", "exclusiveMinimum": 0}},
            },
        },
        "channel": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "carrier_freq_hz": {"type": "number", "exclusiveMinimum": 0},
                "pathloss_exponent": {"type": "number", "minimum": 2, "maximum": 5},
                "pathloss_intercept_db": {"type": ["number", "null"]},
                "shadowing_sigma_db": {"type": "number", "minimum": 0},
                "fading": {"enum": ["rayleigh_iid"]},
                "seed": {"type": ["integer", "null"], "minimum": 0},
            },
        },
        "topology": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "area_side": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": ["integer", "null"], "minimum": 0},
            },
        },
        "data": {
            "type": "object", "additionalProperties": False,
            "properties": {"n_train": _int_pos, "n_test": _int_pos},
        },
        "train": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 0},
                "batch": _int_pos,
                "lr": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "scheme": {"enum": list(losses.SCHEMES)},
                "seed": {"type": ["integer", "null"], "minimum": 0},
                "eval_every": {"type": "integer", "minimum": 0},
                "decision_mode": {"enum": ["threshold", "per_subcarrier_argmax"]},
                "w_scale_c": {"type": "number", "exclusiveMinimum": 0},
                "beta_floor": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.5},
                "hyper": {
                    "type": "object", "additionalProperties": False,
                    "properties": {
                        "x1": {"type": "number", "exclusiveMaximum": 0},
                        "x2": _num,
                        "x3": {"type": "number", "exclusiveMinimum": 0},
                        "nfl_variant": {"enum": ["continuous", "as_printed"]},
                    },
                },
            },
        },
        "sweep": {
            "type": ["object", "null"], "additionalProperties": False,
            "properties": {
                "axis": {"enum": ["B", "I", "N"]},
                "values": {"type": "array", "items": _int_pos, "minItems": 1},
                "algorithms": {"type": "array", "items": {"enum": list(ALGORITHMS)}, "minItems": 1},
                "n_train": _int_pos,
                "n_test": _int_pos,
                "epochs": {"type": ["integer", "null"], "minimum": 0},
            },
        },
        "datl": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "position_seed": {"type": ["integer", "null"], "minimum": 0},
                "retrain": {"type": "boolean"},
            },
        },
    },
}

DEFAULT_CONFIG = {
    "seed": 0,
    "output_dir": "runs",
    "sys": {"B": 3, "N": 4, "I": 10, "M_t": 4, "M_r": 2, "noise_dbm": -26.0, "p_max_dbm": 40.0,
            "r_min": 0.02, "alpha": None},
    "channel": {"carrier_freq_hz": 2.1e9, "pathloss_exponent": 3.0, "pathloss_intercept_db": None,
                "shadowing_sigma_db": 8.0, "fading": "rayleigh_iid", "seed": None},
    "topology": {"area_side": 250.0, "seed": None},
    "data": {"n_train": 2000, "n_test": 200},
    "train": {"epochs": 20, "batch": 100, "lr": None, "scheme": "S1", "seed": None, "eval_every": 0,
              "decision_mode": "threshold", "w_scale_c": 2.0, "beta_floor": 1e-3,
              "hyper": {"x1": -1.0, "x2": 0.0, "x3": 0.11, "nfl_variant": "continuous"}},
    "sweep": None,
    "datl": {"position_seed": None, "retrain": True},
}

SWEEP_DEFAULTS = {"algorithms": list(ALGORITHMS), "n_train": 1000, "n_test": 200, "epochs": None}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _path(err) -> str:
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def validate_config(raw: dict) -> None:
    """Raise ConfigError listing every schema violation, one per field."""
    if not isinstance(raw, dict):
        raise ConfigError(["<root>: config must be a JSON object"])
    validator = jsonschema.Draft7Validator(CONFIG_SCHEMA)
    problems = sorted(f"{_path(e)}: {e.message}" for e in validator.iter_errors(raw))
    sweep = raw.get("sweep") or {}
    vals = sweep.get("values")
    if isinstance(vals, list) and all(isinstance(v, int) for v in vals) and vals != sorted(set(vals)):
        problems.append("sweep.values: must be strictly increasing")
    if problems:
        raise ConfigError(problems)


def set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        nxt = cur.get(k)
        if not isinstance(nxt, dict):
            nxt = {}
            cur[k] = nxt
        cur = nxt
    cur[keys[-1]] = value


@dataclass
class ExperimentConfig:
    """Resolved experiment configuration; ``raw`` is the full effective dict."""

    raw: dict

    @classmethod
    def from_dict(cls, d: dict | None = None) -> "ExperimentConfig":
        d = d or {}
        validate_config(d)
        eff = _merge(DEFAULT_CONFIG, d)
        if eff["sweep"] is not None:
            eff["sweep"] = _merge(SWEEP_DEFAULTS, eff["sweep"])
            if "axis" not in eff["sweep"] or "values" not in eff["sweep"]:
                raise ConfigError(["sweep: needs both 'axis' and 'values'"])
        seed = eff["seed"]
        for section in ("channel", "topology", "train"):
            if eff[section]["seed"] is None:
                eff[section]["seed"] = seed
        if eff["datl"]["position_seed"] is None:
            eff["datl"]["position_seed"] = seed
        cfg = cls(eff)
        try:
            cfg.system()
            cfg.train_config()
        except ValueError as exc:
            raise ConfigError([str(exc)]) from exc
        return cfg

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "ExperimentConfig":
        d = {}
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise MissingInputError(f"config file {p} does not exist")
            try:
                d = json.loads(p.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError([f"<file>: not valid JSON ({exc})"]) from exc
        return cls.from_dict(_merge(d, overrides or {}))

    # -- views --------------------------------------------------------------------
    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    def system(self, **override) -> system.SystemConfig:
        s = self.raw["sys"]
        sc = system.SystemConfig(B=s["B"], N=s["N"], I=s["I"], M_t=s["M_t"], M_r=s["M_r"],
                                 sigma2=system.dbm_to_watts(s["noise_dbm"]),
                                 p_max=system.dbm_to_watts(s["p_max_dbm"]), r_min=s["r_min"],
                                 alpha=s["alpha"])
        return sc.replace(**override) if override else sc

    def channel_config(self) -> channel.ChannelGenConfig:
        c = self.raw["channel"]
        return channel.ChannelGenConfig(c["carrier_freq_hz"], c["pathloss_exponent"], c["pathloss_intercept_db"],
                                        c["shadowing_sigma_db"], c["fading"], c["seed"])

    def train_config(self, **override) -> training.TrainConfig:
        t = dict(self.raw["train"])
        t.update(override)
        return training.TrainConfig(epochs=t["epochs"], batch=t["batch"], lr=t["lr"], scheme=t["scheme"],
                                    seed=t["seed"], eval_every=t["eval_every"],
                                    hyper=losses.LossHyper(**t["hyper"]), decision_mode=t["decision_mode"])

    def mapping(self, sys: system.SystemConfig) -> OutputMapping:
        t = self.raw["train"]
        return OutputMapping.for_system(sys, c=t["w_scale_c"], beta_floor=t["beta_floor"])

    def with_overrides(self, **dotted) -> "ExperimentConfig":
        d = copy.deepcopy(self.raw)
        for k, v in dotted.items():
            set_path(d, k, v)
        return ExperimentConfig.from_dict(d)

    def hash(self, sections=None) -> str:
        d = self.raw if sections is None else {k: self.raw[k] for k in sections}
        d = {k: v for k, v in d.items() if k != "output_dir"}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


DATA_SECTIONS = ("sys", "channel", "topology", "data")


# --- manifests and small io helpers ------------------------------------------------

def versions() -> dict:
    return {"cfnet": __version__, "numpy": np.__version__, "jsonschema": metadata.version("jsonschema"),
            "python": platform.python_version()}


def write_manifest(path: Path, cfg: ExperimentConfig, command: str, status: str, extra: dict | None = None):
    man = {"command": command, "status": status, "config_hash": cfg.hash(), "seed": cfg.seed,
           "versions": versions(), "config": cfg.raw}
    if extra:
        man.update(extra)
    path.mkdir(parents=True, exist_ok=True)
    (path / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path: Path, rows: list[dict], fields: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        wr.writeheader()
        for r in rows:
            wr.writerow({k: _fmt(r.get(k, "")) for k in fields})


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _json_dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o)}")


# --- data -----------------------------------------------------------------------------

def make_topology(cfg: ExperimentConfig, sys: system.SystemConfig | None = None) -> channel.Topology:
    sys = sys or cfg.system()
    t = cfg.raw["topology"]
    return channel.place_nodes(sys.B, sys.I, t["area_side"], t["seed"])


def generate_data(cfg: ExperimentConfig, sys=None, n_train=None, n_test=None, topo=None):
    sys = sys or cfg.system()
    topo = topo or make_topology(cfg, sys)
    ccfg = cfg.channel_config()
    n_train = n_train or cfg.raw["data"]["n_train"]
    n_test = n_test or cfg.raw["data"]["n_test"]
    train = channel.generate_dataset(topo, ccfg, n_train, sys.N, sys.M_t, sys.M_r)
    test = channel.generate_dataset(topo, ccfg, n_test, sys.N, sys.M_t, sys.M_r, offset=TEST_OFFSET)
    return train, test, topo


def gen_data(cfg: ExperimentConfig) -> Path:
    out = cfg.output_dir / "data"
    write_manifest(out, cfg, "gen-data", "running")
    train, test, topo = generate_data(cfg)
    channel.save_dataset(train, out / "train.cfds")
    channel.save_dataset(test, out / "test.cfds")
    _json_dump(out / "topology.json", topo.to_dict())
    write_manifest(out, cfg, "gen-data", "complete", {
        "data_hash": cfg.hash(DATA_SECTIONS),
        "fingerprints": {"train": train.fingerprint, "test": test.fingerprint}})
    return out


def load_data(cfg: ExperimentConfig):
    d = cfg.output_dir / "data"
    hint = f"run `cfnet gen-data --output-dir {cfg.output_dir}` first"
    for name in ("train.cfds", "test.cfds", "topology.json", "manifest.json"):
        if not (d / name).exists():
            raise MissingInputError(f"dataset file {d / name} not found; {hint}")
    man = json.loads((d / "manifest.json").read_text())
    if man.get("status") != "complete":
        raise MissingInputError(f"dataset in {d} is incomplete; {hint}")
    if man.get("data_hash") != cfg.hash(DATA_SECTIONS):
        raise MissingInputError(f"dataset in {d} was generated with a different sys/channel/topology/data "
                                f"config; {hint} with the current config")
    topo = channel.Topology.from_dict(json.loads((d / "topology.json").read_text()))
    train = channel.load_dataset(d / "train.cfds")
    test = channel.load_dataset(d / "test.cfds")
    train.topology = topo
    test.topology = topo
    return train, test, topo


# --- training runs --------------------------------------------------------------------

SUMMARY_FIELDS = ["run", "algorithm", "scheme", "seed", "config_hash", "mean_weighted_sum_rate",
                  "rate_violation_frac", "l_abs_mean", "sbs_power_mean", "flops", "steps", "skipped_steps",
                  "converged"]


def _summary_row(name, algorithm, scheme, cfg, metrics, steps=0, skipped=0, converged=""):
    return {"run": name, "algorithm": algorithm, "scheme": scheme, "seed": cfg.seed, "config_hash": cfg.hash(),
            "mean_weighted_sum_rate": metrics["mean_weighted_sum_rate"],
            "rate_violation_frac": metrics["rate_violation_frac"], "l_abs_mean": metrics["l_abs_mean"],
            "sbs_power_mean": float(np.mean(metrics["sbs_power_mean"])), "flops": int(metrics["flops"]),
            "steps": steps, "skipped_steps": skipped, "converged": converged}


def train_models(cfg: ExperimentConfig, algorithm: str, train_ds, sys=None, trace_path=None, **train_override):
    """Train CMTSSL or DMTSSL on an in-memory dataset; returns the TrainResult."""
    sys = sys or cfg.system()
    tc = cfg.train_config(**train_override)
    mapping = cfg.mapping(sys)
    if algorithm == "cmtssl":
        spec = PolicyNetworkSpec.centralized(sys, mapping=mapping, decision_mode=tc.decision_mode)
        return training.train_cmtssl(train_ds, tc, sys, spec=spec)
    if algorithm == "dmtssl":
        spec = PolicyNetworkSpec.local(sys, mapping=mapping, decision_mode=tc.decision_mode)
        local = [channel.slice_local(train_ds, b) for b in range(sys.B)]
        return training.train_dmtssl(local, tc, sys, spec=spec, trace_path=trace_path)
    raise ValueError(f"unknown algorithm {algorithm!r}")


def run_name(algorithm: str, cfg: ExperimentConfig) -> str:
    return f"{algorithm}-{cfg.raw['train']['scheme']}-s{cfg.seed}"


def train_run(cfg: ExperimentConfig, algorithm: str, trace: bool = False) -> Path:
    train_ds, test_ds, _ = load_data(cfg)
    sys = cfg.system()
    name = run_name(algorithm, cfg)
    out = cfg.output_dir / "runs" / name
    command = f"train-{algorithm}"
    write_manifest(out, cfg, command, "running")
    res = train_models(cfg, algorithm, train_ds, sys, trace_path=out / "bus_trace.jsonl" if trace else None)
    for b, m in enumerate(res.models):
        m.save(out / (f"sbs{b}.cfth" if algorithm == "dmtssl" else "model.cfth"))
    res.write_log(out / "metrics.jsonl")
    metrics = training.evaluate_policy(res.models if algorithm == "dmtssl" else res.models[0], test_ds, sys)
    conv = training.convergence_indicators(res.log)
    _json_dump(out / "eval.json", {"test": metrics, "convergence": conv, "evals": res.evals})
    row = _summary_row(name, algorithm, cfg.raw["train"]["scheme"], cfg, metrics, res.steps,
                       res.skipped_steps, conv.get("converged", ""))
    write_csv(out / "summary.csv", [row], SUMMARY_FIELDS)
    write_manifest(out, cfg, command, "complete")
    return out


def baseline_metrics(kind: str, test_ds, sys, seed: int) -> dict:
    stats = {}
    w, v = baselines.baseline_decisions(test_ds.coeffs, sys, kind, seed=seed, stats=stats)
    m = training.evaluate_decisions(test_ds.coeffs, w, v, sys)
    fl = baselines.flops_rsa_zfbf(sys) if kind == "rsa_zfbf" else baselines.flops_gsa_zfbf(sys)
    m["flops"] = fl.total
    m["zf_fallbacks"] = stats.get("fallbacks", 0)
    return m


def baseline_run(cfg: ExperimentConfig, kinds=("rsa_zfbf", "gsa_zfbf")) -> Path:
    _, test_ds, _ = load_data(cfg)
    sys = cfg.system()
    out = cfg.output_dir / "runs" / f"baselines-s{cfg.seed}"
    write_manifest(out, cfg, "baseline", "running")
    rows, full = [], {}
    for kind in kinds:
        m = baseline_metrics(kind, test_ds, sys, cfg.seed)
        full[kind] = m
        rows.append(_summary_row(f"{kind}-s{cfg.seed}", kind, "", cfg, m))
    _json_dump(out / "eval.json", full)
    write_csv(out / "summary.csv", rows, SUMMARY_FIELDS)
    write_manifest(out, cfg, "baseline", "complete")
    return out


# --- DATL -----------------------------------------------------------------------------

def new_sbs_position(cfg: ExperimentConfig) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.raw["datl"]["position_seed"], 0xDA71]))
    return rng.uniform(0.0, cfg.raw["topology"]["area_side"], size=2)


def datl_study(cfg: ExperimentConfig, models: list[PolicyModel], topo: channel.Topology,
               retrain: bool | None = None) -> dict:
    """Add one SBS, transfer the nearest model, and compare with retraining from scratch."""
    retrain = cfg.raw["datl"]["retrain"] if retrain is None else retrain
    sys = cfg.system()
    if len(models) != sys.B:
        raise ValueError(f"expected {sys.B} trained per-SBS models, got {len(models)}")
    new_xy = new_sbs_position(cfg)
    topo_new = topo.with_extra_sbs(new_xy)
    sys_new = sys.replace(B=sys.B + 1)
    train_new, test_new, _ = generate_data(cfg, sys_new, topo=topo_new)

    before = ad.backward_calls()
    new_model, b_star = training.datl_transfer(models, topo, new_xy)
    datl_models = list(models) + [new_model]
    datl_metrics = training.evaluate_policy(datl_models, test_new, sys_new)
    datl_steps = ad.backward_calls() - before

    out = {"new_position": new_xy.tolist(), "b_star": b_star, "B_before": sys.B, "B_after": sys_new.B,
           "datl": {"mean_weighted_sum_rate": datl_metrics["mean_weighted_sum_rate"],
                    "training_steps": 0, "gradient_computations": datl_steps}}
    if retrain:
        res = train_models(cfg, "dmtssl", train_new, sys_new)
        rm = training.evaluate_policy(res.models, test_new, sys_new)
        out["retrained"] = {"mean_weighted_sum_rate": rm["mean_weighted_sum_rate"], "training_steps": res.steps}
        ratio = datl_metrics["mean_weighted_sum_rate"] / rm["mean_weighted_sum_rate"] \
            if rm["mean_weighted_sum_rate"] > 0 else float("inf")
        out["ratio"] = ratio
        out["loss_pct"] = 100.0 * (1.0 - ratio)
        out["within_5pct"] = bool(ratio >= 0.95)
    return out


def load_dmtssl_models(run_dir: Path, sys: system.SystemConfig) -> list[PolicyModel]:
    expect = PolicyNetworkSpec.local(sys)
    paths = [run_dir / f"sbs{b}.cfth" for b in range(sys.B)]
    missing = [p for p in paths if not p.exists()]
    if missing:
        raise MissingInputError(f"missing DMTSSL checkpoint {missing[0]}; run `cfnet train-dmtssl` first")
    return [PolicyModel.load(p, expect) for p in paths]


def datl_run(cfg: ExperimentConfig, from_run: Path | None = None, retrain: bool | None = None) -> Path:
    _, _, topo = load_data(cfg)
    sys = cfg.system()
    src = Path(from_run) if from_run else cfg.output_dir / "runs" / run_name("dmtssl", cfg)
    models = load_dmtssl_models(src, sys)
    out = cfg.output_dir / "runs" / f"datl-{cfg.raw['train']['scheme']}-s{cfg.seed}"
    write_manifest(out, cfg, "transfer-datl", "running", {"source_run": str(src)})
    res = datl_study(cfg, models, topo, retrain)
    _json_dump(out / "datl.json", res)
    flops = models[0].spec.flops()
    rows = [{"run": out.name, "algorithm": "datl", "scheme": cfg.raw["train"]["scheme"], "seed": cfg.seed,
             "config_hash": cfg.hash(), "mean_weighted_sum_rate": res["datl"]["mean_weighted_sum_rate"],
             "flops": flops, "steps": 0}]
    if "retrained" in res:
        rows.append({"run": out.name, "algorithm": "dmtssl_retrained", "scheme": cfg.raw["train"]["scheme"],
                     "seed": cfg.seed, "config_hash": cfg.hash(),
                     "mean_weighted_sum_rate": res["retrained"]["mean_weighted_sum_rate"], "flops": flops,
                     "steps": res["retrained"]["training_steps"]})
    write_csv(out / "summary.csv", rows, SUMMARY_FIELDS)
    write_manifest(out, cfg, "transfer-datl", "complete", {"source_run": str(src)})
    return out


# --- sweeps ---------------------------------------------------------------------------

SWEEP_FIELDS = ["algorithm", "mean_sum_rate", "flops"]


def sweep_cell(raw: dict, value: int) -> list[dict]:
    """All algorithms at one sweep point. Pure in (raw config, value)."""
    cfg = ExperimentConfig.from_dict(raw)
    sw = cfg.raw["sweep"]
    axis = sw["axis"]
    sys = cfg.system(**{axis: value})
    train_ds, test_ds, _ = generate_data(cfg, sys, sw["n_train"], sw["n_test"])
    epochs = sw["epochs"] if sw["epochs"] is not None else cfg.raw["train"]["epochs"]
    rows = []
    for alg in sw["algorithms"]:
        if alg in ("cmtssl", "dmtssl"):
            res = train_models(cfg, alg, train_ds, sys, epochs=epochs)
            m = training.evaluate_policy(res.models if alg == "dmtssl" else res.models[0], test_ds, sys)
        else:
            m = baseline_metrics(alg, test_ds, sys, cfg.seed)
        rows.append({axis: value, "algorithm": alg, "mean_sum_rate": m["mean_weighted_sum_rate"],
                     "flops": int(m["flops"])})
    return rows


def sweep_run(cfg: ExperimentConfig) -> Path:
    sw = cfg.raw["sweep"]
    if sw is None:
        raise ConfigError(["sweep: no sweep section given (use --axis and --values)"])
    axis = sw["axis"]
    out = cfg.output_dir / f"sweep-{axis}"
    write_manifest(out, cfg, "sweep", "running")
    workers = channel.worker_count()
    raw = cfg.raw
    if workers > 1 and len(sw["values"]) > 1:
        with ProcessPoolExecutor(min(workers, len(sw["values"]))) as pool:
            cells = list(pool.map(sweep_cell, [raw] * len(sw["values"]), sw["values"]))
    else:
        cells = [sweep_cell(raw, v) for v in sw["values"]]
    rows = [r for cell in cells for r in cell]
    write_csv(out / "sweep.csv", rows, [axis] + SWEEP_FIELDS)
    write_manifest(out, cfg, "sweep", "complete", {"axis": axis})
    return out


# --- robustness lab and gradcheck -----------------------------------------------------

def robustness_run(cfg: ExperimentConfig, Z: int = 5, etas=(0.0, 0.2, 0.4), epochs: int = 60) -> Path:
    out = cfg.output_dir / "robustness"
    write_manifest(out, cfg, "robustness-lab", "running")
    hyper = losses.LossHyper(**cfg.raw["train"]["hyper"])
    rows = robustness.run_noise_tolerance_experiment(Z=Z, etas=tuple(etas), seed=cfg.seed, epochs=epochs,
                                                     hyper=hyper)
    robustness.write_report_csv(rows, out / "report.csv")
    write_manifest(out, cfg, "robustness-lab", "complete", {"Z": Z, "etas": list(etas)})
    return out


GRADCHECK_DIMS = dict(B=2, N=2, I=2, M_t=2, M_r=2)


def gradcheck_instances(n: int = 50, seed: int = 0, h: float = 1e-5, sys: system.SystemConfig | None = None):
    """Reverse-mode vs central-difference gradients of every task value w.r.t. the raw head pre-activations.

    The decision layer is bypassed (v = v-bar): the straight-through backward is
    the identity, so this is the gradient the network actually receives.
    Returns one dict per instance with the max relative error.
    """
    sys = sys or system.SystemConfig(**GRADCHECK_DIMS)
    spec = PolicyNetworkSpec.centralized(sys)
    topo = channel.place_nodes(sys.B, sys.I, 250.0, seed)
    ccfg = channel.ChannelGenConfig(seed=seed)

    def forward(tape, z):
        s = ad.sigmoid(tape.leaf(z))
        w, vbar, _ = map_outputs(s, spec)
        return rate_graph(H, w, vbar, sys)

    rows = []
    for k in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6C, k]))
        H = channel.generate_sample(topo, ccfg, rng, sys.N, sys.M_t, sys.M_r)[None]
        z = rng.standard_normal((1, spec.output_dim))
        worst = 0.0
        for j in range(1 + sys.I + sys.B):
            tape = ad.Tape()
            zl = tape.leaf(z)
            s = ad.sigmoid(zl)
            w, vbar, _ = map_outputs(s, spec)
            tv = rate_graph(H, w, vbar, sys)
            seed_vec = np.zeros(tv.shape)
            seed_vec[..., j] = 1.0
            tape.backward(tv, seed_vec)
            num = ad.numerical_grad(lambda zz: float(forward(ad.Tape(), zz).value[0, j]), z, h)
            worst = max(worst, ad.relative_error(zl.grad, num))
        rows.append({"instance": k, "max_rel_error": worst})
    return rows


def gradcheck_run(cfg: ExperimentConfig, n: int = 50) -> Path:
    out = cfg.output_dir / "gradcheck"
    write_manifest(out, cfg, "gradcheck", "running")
    rows = gradcheck_instances(n, cfg.seed)
    write_csv(out / "gradcheck.csv", rows, ["instance", "max_rel_error"])
    worst = max(r["max_rel_error"] for r in rows) if rows else 0.0
    write_manifest(out, cfg, "gradcheck", "complete", {"max_rel_error": worst, "instances": n})
    return out


# --- report ---------------------------------------------------------------------------

REPORT_FIELDS = ["config_hash", "seed", "run", "algorithm", "scheme", "mean_weighted_sum_rate",
                 "rate_violation_frac", "l_abs_mean", "sbs_power_mean", "flops", "steps", "skipped_steps",
                 "converged"]
PLOT_FIELDS = ["x", "series", "y"]


def _find_manifests(root: Path):
    for man in sorted(root.rglob("manifest.json")):
        if "report" in man.relative_to(root).parts[:1]:
            continue
        yield man


def report(root) -> dict:
    """Merge completed runs under ``root`` into ``root/report``. Re-running gives identical files."""
    root = Path(root)
    out = root / "report"
    warnings_, partial = [], []
    rows, loss_curves, sweep_rate, sweep_flops, robust = [], [], [], [], []
    if not root.exists():
        raise MissingInputError(f"report directory {root} does not exist")
    for man_path in _find_manifests(root):
        run_dir = man_path.parent
        rel = str(run_dir.relative_to(root))
        try:
            man = json.loads(man_path.read_text())
        except json.JSONDecodeError:
            partial.append(rel)
            continue
        if man.get("status") != "complete":
            partial.append(rel)
            continue
        cmd = man.get("command", "")
        if (run_dir / "summary.csv").exists():
            for r in read_csv(run_dir / "summary.csv"):
                rows.append({k: r.get(k, "") for k in REPORT_FIELDS})
        if (run_dir / "metrics.jsonl").exists():
            for line in (run_dir / "metrics.jsonl").read_text().splitlines():
                rec = json.loads(line)
                loss_curves.append({"x": rec["step"], "series": run_dir.name, "y": rec["joint_loss"]})
        if cmd == "sweep" and (run_dir / "sweep.csv").exists():
            axis = man.get("axis")
            for r in read_csv(run_dir / "sweep.csv"):
                series = f"{r['algorithm']}-s{man['seed']}"
                sweep_rate.append({"axis": axis, "x": r[axis], "series": series, "y": r["mean_sum_rate"]})
                sweep_flops.append({"axis": axis, "x": r[axis], "series": series, "y": r["flops"]})
        if cmd == "robustness-lab" and (run_dir / "report.csv").exists():
            for r in read_csv(run_dir / "report.csv"):
                robust.append({"x": r["eta"], "series": f"{r['loss']}-s{man['seed']}", "y": r["clean_test_acc"]})
    if not rows and not sweep_rate and not robust:
        warnings_.append(f"no completed runs found under {root}")
    for p in partial:
        warnings_.append(f"partial run skipped: {p}")
    for w in warnings_:
        log.warning(w)

    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    rows.sort(key=lambda r: (r["config_hash"], str(r["seed"]), r["run"], r["algorithm"]))
    write_csv(out / "summary.csv", rows, REPORT_FIELDS)
    write_csv(out / "plot_training_loss.csv", loss_curves, PLOT_FIELDS)
    for axis in sorted({r["axis"] for r in sweep_rate}):
        write_csv(out / f"plot_sweep_{axis}_rate.csv", [r for r in sweep_rate if r["axis"] == axis], PLOT_FIELDS)
        write_csv(out / f"plot_sweep_{axis}_flops.csv", [r for r in sweep_flops if r["axis"] == axis],
                  PLOT_FIELDS)
    if robust:
        write_csv(out / "plot_robustness.csv", robust, PLOT_FIELDS)
    summary = {"runs": len(rows), "partial": partial, "warnings": warnings_}
    _json_dump(out / "report.json", summary)
    return summary
