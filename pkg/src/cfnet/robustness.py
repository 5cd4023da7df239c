"""Label-noise tolerance of the NFL / EL losses on a toy Z-class problem.

A softmax classifier is scored with the L1 residual between its output and a
one-hot label, x = ||q_c - u||_1 = 2 - 2 u_c, fed through the loss. Under
symmetric noise the noisy risk is an affine function of the clean risk
whenever sum_j L(2 - 2 u_j) is constant in u, which is what the checks here
measure.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .losses import LossHyper, el, el_grad, nfl, nfl_grad


def softmax(g) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    z = g - np.max(g, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def loss_kernel(name: str, hyper: LossHyper = LossHyper()):
    if name == "el":
        return (lambda x: el(x, hyper.x2)), (lambda x: el_grad(x, hyper.x2))
    if name == "nfl":
        return ((lambda x: nfl(x, hyper.x1, hyper.nfl_variant)),
                (lambda x: nfl_grad(x, hyper.x1, hyper.nfl_variant)))
    raise ValueError(f"unknown loss {name!r}")


def symmetry_constant(name: str, Z: int, hyper: LossHyper = LossHyper()) -> float:
    """sum_j L(2 - 2 u_j) over all classes, valid while every residual is on the linear branch."""
    if name == "el":
        return float(np.exp(hyper.x2) * (Z * (3.0 - hyper.x2) - 2.0))
    x1 = hyper.x1
    offset = 2.0 / x1 if hyper.nfl_variant == "continuous" else 1.0 / x1
    return (2.0 * Z - 2.0) / x1**2 - Z * offset


def mae_residual_loss(u, c, loss: str = "el", hyper: LossHyper = LossHyper()):
    u = np.asarray(u, dtype=float)
    c = np.asarray(c)
    uc = np.take_along_axis(u, c[..., None], axis=-1)[..., 0] if u.ndim > 1 else u[c]
    return loss_kernel(loss, hyper)[0](2.0 - 2.0 * uc)


def corrupt_symmetric(labels, eta: float, Z: int, rng: np.random.Generator) -> np.ndarray:
    """Keep each label with prob. 1 - eta, else move it uniformly to one of the other Z - 1 classes."""
    if not 0.0 <= eta < (Z - 1) / Z:
        raise ValueError(f"noise rate {eta} outside [0, (Z-1)/Z) for Z={Z}")
    labels = np.asarray(labels)
    flip = rng.random(labels.shape) < eta
    shift = rng.integers(1, Z, size=labels.shape)
    return np.where(flip, (labels + shift) % Z, labels)


@dataclass
class ToyClassificationSet:
    features: np.ndarray  # (n, 2)
    labels: np.ndarray  # (n,) in [0, Z)
    Z: int

    def __len__(self):
        return len(self.labels)


def make_blobs(Z: int, n: int, rng: np.random.Generator, radius: float = 5.0) -> ToyClassificationSet:
    """Unit-variance Gaussian blobs with means evenly spaced on a circle."""
    angles = 2 * np.pi * np.arange(Z) / Z
    means = radius * np.column_stack([np.cos(angles), np.sin(angles)])
    labels = rng.integers(0, Z, size=n)
    return ToyClassificationSet(means[labels] + rng.standard_normal((n, 2)), labels, Z)


class SoftmaxClassifier:
    """One hidden ReLU layer followed by softmax."""

    def __init__(self, Z: int, width: int = 64, rng: np.random.Generator | None = None, in_dim: int = 2):
        rng = rng if rng is not None else np.random.default_rng(0)
        lim1 = np.sqrt(6.0 / (in_dim + width))
        lim2 = np.sqrt(6.0 / (width + Z))
        self.params = {
            "W0": rng.uniform(-lim1, lim1, (in_dim, width)), "b0": np.zeros(width),
            "W1": rng.uniform(-lim2, lim2, (width, Z)), "b1": np.zeros(Z),
        }

    def forward(self, tape: ad.Tape, x):
        p = {k: tape.leaf(v, name=k) for k, v in self.params.items()}
        h = ad.relu(ad.affine(tape.leaf(x), p["W0"], p["b0"]))
        return ad.softmax(ad.affine(h, p["W1"], p["b1"])), p

    def __call__(self, x) -> np.ndarray:
        h = np.maximum(np.asarray(x) @ self.params["W0"] + self.params["b0"], 0.0)
        return softmax(h @ self.params["W1"] + self.params["b1"])

    def accuracy(self, data: ToyClassificationSet) -> float:
        return float(np.mean(np.argmax(self(data.features), axis=-1) == data.labels))


def empirical_risk(model, features, labels, loss: str = "el", hyper: LossHyper = LossHyper()) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("empirical risk of an empty dataset")
    return float(np.mean(mae_residual_loss(model(features), labels, loss, hyper)))


def train_classifier(data: ToyClassificationSet, labels, loss: str, rng: np.random.Generator,
                     epochs: int = 60, batch: int = 100, lr: float = 1e-2,
                     hyper: LossHyper = LossHyper()) -> SoftmaxClassifier:
    model = SoftmaxClassifier(data.Z, rng=rng)
    fn, dfn = loss_kernel(loss, hyper)
    opt = ad.AdamState(lr=lr)
    n = len(data)
    onehot = np.eye(data.Z)[np.asarray(labels)]
    for _ in range(epochs):
        perm = rng.permutation(n)
        for k in range(0, n, batch):
            idx = perm[k:k + batch]
            tape = ad.Tape()
            u, p = model.forward(tape, data.features[idx])
            uc = ad.sum_(ad.mul(u, onehot[idx]), axis=-1)
            resid = ad.sub(2.0, ad.mul(uc, 2.0))
            risk = ad.mean(ad.elementwise(resid, fn, dfn))
            tape.backward(risk)
            ad.adam_step(model.params, {k2: v.grad for k2, v in p.items()}, opt)
    return model


def risk_identity_residual(model, data: ToyClassificationSet, eta: float, loss: str,
                           rng: np.random.Generator, hyper: LossHyper = LossHyper()) -> float:
    """Relative gap between the noisy risk and (1 - eta Z/(Z-1)) R + C eta/(Z-1) on a frozen model."""
    Z = data.Z
    clean = empirical_risk(model, data.features, data.labels, loss, hyper)
    noisy_labels = corrupt_symmetric(data.labels, eta, Z, rng)
    noisy = empirical_risk(model, data.features, noisy_labels, loss, hyper)
    pred = (1.0 - eta * Z / (Z - 1)) * clean + symmetry_constant(loss, Z, hyper) * eta / (Z - 1)
    return abs(noisy - pred) / abs(pred)


def run_noise_tolerance_experiment(Z: int = 5, etas=(0.0, 0.2, 0.4), loss_list=("nfl", "el"), seed: int = 0,
                                   n_train: int = 2000, n_test: int = 2000, n_risk: int = 20000,
                                   epochs: int = 60, hyper: LossHyper = LossHyper()) -> list[dict]:
    """Train one classifier per (loss, eta) on corrupted labels; score on clean test labels."""
    for eta in etas:
        if not 0.0 <= eta < (Z - 1) / Z:
            raise ValueError(f"noise rate {eta} outside [0, (Z-1)/Z)")
    ss = np.random.SeedSequence(seed)
    data_rng, *_ = [np.random.default_rng(s) for s in ss.spawn(1)]
    train = make_blobs(Z, n_train, data_rng)
    test = make_blobs(Z, n_test, data_rng)
    risk_set = make_blobs(Z, n_risk, data_rng)
    rows = []
    for li, loss in enumerate(loss_list):
        for ei, eta in enumerate(etas):
            cell = np.random.default_rng(np.random.SeedSequence([seed, li, ei]))
            labels = corrupt_symmetric(train.labels, eta, Z, cell)
            # identical init and batch order across eta for a given loss
            model = train_classifier(train, labels, loss, np.random.default_rng([seed, li]), epochs=epochs,
                                     hyper=hyper)
            rows.append({
                "loss": loss,
                "eta": eta,
                "clean_test_acc": model.accuracy(test),
                "noisy_train_risk": empirical_risk(model, train.features, labels, loss, hyper),
                "identity_residual": risk_identity_residual(model, risk_set, eta, loss, cell, hyper),
            })
    return rows


def write_report_csv(rows: list[dict], path) -> None:
    fields = ["loss", "eta", "clean_test_acc", "noisy_train_risk", "identity_residual"]
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=fields)
        wr.writeheader()
        for r in rows:
            wr.writerow({k: r[k] for k in fields})
