"""Self-checks: finite-difference gradients, MINE on Gaussians, EER against brute force."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .evaluate import compute_eer
from .losses import (adversarial_loss, am_softmax_loss, dv_bound, identity_change_loss, mi_objective,
                     reconstruction_loss, speaker_loss)
from .nets import ModelBundle, ModelConfig, _param_specs
from .train import Adam


@dataclass(frozen=True)
class CaseResult:
    suite: str
    name: str
    value: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.suite}:{self.name} {self.detail}"


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

GRADCHECK_CONFIG = dict(n_bins=33, n_mels=16, frames=8, n_classes=3, d_emb=5, enc_channels=(2, 2),
                        enc_hidden=6, dec_fc=(10,), dec_channels=(3, 2), critic_hidden=6)


def _with_param(model: ModelBundle, name: str, build: Callable[[ModelBundle], Tensor]):
    """Scalar function of one parameter, everything else held at its value."""
    def f(x: Tensor) -> Tensor:
        saved = model.params[name]
        model.params[name] = x
        try:
            return build(model)
        finally:
            model.params[name] = saved
    return f


def gradcheck_cases(seed: int = 0):
    """(loss name, parameter name, scalar function, start value) for every loss."""
    rng = np.random.default_rng(seed)
    model = ModelBundle.init(ModelConfig(**GRADCHECK_CONFIG), seed=seed)
    # Zero-initialized biases put ReLU inputs exactly on the kink wherever a
    # receptive field is all zeros, and a zero critic head kills every critic
    # gradient. Both are moved to a generic point.
    for name, p in model.params.items():
        if name.endswith(".b"):
            p.data = rng.normal(scale=0.1, size=p.shape)
    model.params["critic.fc1.w"].data = rng.normal(scale=0.5, size=model.params["critic.fc1.w"].shape)
    cfg = model.cfg
    n = 3
    xa, xa2, xb = (rng.normal(size=(n, cfg.frames, cfg.n_bins)) for _ in range(3))
    ta, tb = (Tensor(rng.normal(size=(n, cfg.frames, cfg.n_mels))) for _ in range(2))
    labels = np.array([0, 2, 1])

    def ls(m):
        return speaker_loss(m.classify(m.encode_speaker(xa)), labels)

    def ladv(m):
        return adversarial_loss(m.classify(m.encode_residual(xa), frozen=True))

    def v(m):
        return mi_objective(m, m.encode_speaker(xa), m.encode_speaker(xa2),
                            m.encode_residual(xa), m.encode_residual(xa2))

    def lr(m):
        return reconstruction_loss(m.decode(m.encode_speaker(xa), m.encode_residual(xa)), ta)

    def lic(m):
        return identity_change_loss(m, m.encode_speaker(xa), m.encode_speaker(xb),
                                    m.encode_residual(xa), m.encode_residual(xb), ta, tb)

    def am(m):
        return am_softmax_loss(m.encode_speaker(xa), m.params["cls.w"], labels)

    plan = {
        "L_S": (ls, ["spk.conv0.w", "spk.frame.b", "spk.out.w", "cls.w", "cls.b"]),
        "L_adv": (ladv, ["res.conv1.w", "res.frame.b", "res.out.w"]),
        "V": (v, ["critic.fc0.w", "critic.fc1.w", "critic.fc1.b", "spk.out.w", "res.conv0.w"]),
        "L_R": (lr, ["dec.fc0.w", "dec.fc1.b", "dec.up0.w", "dec.up1.w", "dec.up1.b", "spk.out.b",
                     "res.conv0.b"]),
        "L_IC": (lic, ["dec.up0.w", "dec.fc1.w", "res.out.w", "spk.frame.b"]),
        "AM-softmax": (am, ["cls.w", "spk.out.w", "spk.conv1.b"]),
    }
    for loss_name, (build, names) in plan.items():
        for pname in names:
            yield loss_name, pname, _with_param(model, pname, build), model.params[pname].data.copy()


def gradcheck_suite(eps: float = 1e-5, tol: float = 1e-4, seed: int = 0) -> list[CaseResult]:
    out = []
    for loss_name, pname, f, x0 in gradcheck_cases(seed):
        err = ad.finite_difference_check(f, x0, eps=eps)
        out.append(CaseResult("gradcheck", f"{loss_name}/{pname}", err, err < tol,
                              f"max rel err {err:.2e} (limit {tol:g})"))
    return out


# ---------------------------------------------------------------------------
# MINE on correlated Gaussians
# ---------------------------------------------------------------------------

def gaussian_mi(rho: float) -> float:
    return 0.0 - 0.5 * math.log(1.0 - rho * rho)


def _gaussian_pairs(rng: np.random.Generator, rho: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    x = rng.standard_normal(n)
    y = rho * x + math.sqrt(1.0 - rho * rho) * rng.standard_normal(n)
    return x[:, None], y[:, None]


def _critic_only(hidden: int, bound: float, seed: int) -> ModelBundle:
    cfg = ModelConfig(d_emb=1, critic_hidden=hidden, critic_bound=bound)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, fan_in, fan_out in _param_specs(cfg):
        if name.startswith("critic."):
            bound_ = math.sqrt(6.0 / (fan_in + fan_out)) if fan_in else 0.0
            params[name] = Tensor(rng.uniform(-bound_, bound_, shape) if fan_in else np.zeros(shape),
                                  requires_grad=True, name=name)
    return ModelBundle(cfg, params)


def estimate_gaussian_mi(rho: float, seed: int = 0, steps: int = 1500, batch: int = 256,
                         lr: float = 3e-3, hidden: int = 32, eval_size: int = 20000) -> float:
    """Train the critic alone on the DV bound, then evaluate it on fresh samples.

    Marginal samples pair each ``x`` with a ``y`` from another draw.
    """
    rng = np.random.default_rng(seed)
    model = _critic_only(hidden, 10.0, seed)
    params = model.group("critic")
    opt = Adam()
    for _ in range(steps):
        x, y = _gaussian_pairs(rng, rho, batch)
        y_marg = y[rng.permutation(batch)]
        bound = dv_bound(model.critic(Tensor(x), Tensor(y)), model.critic(Tensor(x), Tensor(y_marg)))
        opt.step(params, ad.backward(ad.neg(bound), params), lr)
    x, y = _gaussian_pairs(rng, rho, eval_size)
    _, y_ind = _gaussian_pairs(rng, rho, eval_size)
    return dv_bound(model.critic(Tensor(x), Tensor(y)), model.critic(Tensor(x), Tensor(y_ind))).item()


def mi_bench(rhos=(0.0, 0.5, 0.9), seeds=(0, 1, 2), tol: float = 0.10, zero_cap: float = 0.05,
             **kw) -> list[CaseResult]:
    out = []
    for rho in rhos:
        target = gaussian_mi(rho)
        for seed in seeds:
            est = estimate_gaussian_mi(rho, seed, **kw)
            ok = abs(est - target) <= tol and (rho != 0.0 or est <= zero_cap)
            out.append(CaseResult("mi-bench", f"rho={rho}/seed={seed}", est, ok,
                                  f"estimate {est:.4f} vs {target:.4f} nats (tol {tol})"))
    return out


# ---------------------------------------------------------------------------
# EER against brute force
# ---------------------------------------------------------------------------

def brute_force_eer(scores, labels) -> tuple[float, float]:
    """Reference sweep: every midpoint between distinct scores plus +-inf, counted by loops."""
    scores = [float(s) for s in scores]
    labels = [bool(l) for l in labels]
    distinct = sorted(set(scores))
    cands = [-math.inf] + [(a + b) / 2 for a, b in zip(distinct, distinct[1:])] + [math.inf]
    n_t = sum(labels)
    n_n = len(labels) - n_t
    best = None
    for t in cands:
        fa = sum(1 for s, l in zip(scores, labels) if not l and s >= t) / n_n
        fr = sum(1 for s, l in zip(scores, labels) if l and s < t) / n_t
        gap = abs(fa - fr)
        if best is None or gap < best[0]:
            best = (gap, (fa + fr) / 2, t)
    return best[1], best[2]


def random_score_set(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n = int(rng.integers(2, 60))
    labels = rng.random(n) < rng.uniform(0.2, 0.8)
    labels[0], labels[1] = True, False
    sep = rng.uniform(0, 2)
    scores = rng.normal(size=n) + sep * labels
    if rng.random() < 0.5:  # force ties
        scores = np.round(scores, 1)
    return scores, labels


def eer_oracle(n_sets: int = 1000, seed: int = 0) -> list[CaseResult]:
    rng = np.random.default_rng(seed)
    mismatches = []
    transform_fail = 0
    for i in range(n_sets):
        scores, labels = random_score_set(rng)
        ref_eer, ref_thr = brute_force_eer(scores, labels)
        got = compute_eer(scores, labels)
        if got.eer != ref_eer or got.threshold != ref_thr:
            mismatches.append(i)
        if compute_eer(np.exp(scores) * 3.0 - 1.0, labels).eer != got.eer:
            transform_fail += 1
    return [
        CaseResult("eer-oracle", "brute-force", float(len(mismatches)), not mismatches,
                   f"{n_sets - len(mismatches)}/{n_sets} score sets agree exactly"),
        CaseResult("eer-oracle", "monotone-transform", float(transform_fail), transform_fail == 0,
                   f"{n_sets - transform_fail}/{n_sets} invariant under exp(s)*3-1"),
    ]


SUITES = {"gradcheck": gradcheck_suite, "mi-bench": mi_bench, "eer-oracle": eer_oracle}
