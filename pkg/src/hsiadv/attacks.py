"""Iterative momentum attacks on patch classifiers.

The main method perturbs an example by, at every iteration, building N
independently block-transformed copies of the current adversarial example,
averaging the input-gradient of the feature-distancing objective over the
copies, accumulating an L1-normalized momentum, and taking a signed step:

    m_{i+1} = mu * m_i + g_ave / ||g_ave||_1
    delta   = clip_eps(delta + alpha * sign(m_{i+1}))

After the budget clip, delta is additionally clipped so x + delta stays in
[0, 1]; the next iteration transforms x + delta directly.  ``fgsm`` and
``mi_fgsm`` are the label-based baselines; the full method never uses the
true label (its output-layer term targets the clean prediction).

Perturbations are elementwise bounded: |delta| <= epsilon in max-norm.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .cube import PatchSet
from .losses import LossConfig, clean_reference, loss_from_reference
from .seeding import ATTACK, derive_seed
from .transforms import IDENTITY_REGISTRY, TransformRegistry, make_copies
from .validation import check_patch, check_unit_range

ATTACK_METHODS = ("fgsm", "mi-fgsm", "ours-fgsm", "ours-mi-fgsm")


@dataclass(frozen=True)
class AttackConfig:
    """All attack hyperparameters; defaults follow the standard configuration."""

    epsilon: float = 0.03
    alpha: float = 2.0 / 255.0
    mu: float = 1.0
    copies: int = 10
    iterations: int = 20
    spatial_divisions: int = 3
    spectral_divisions: int = 3
    loss: LossConfig = field(default_factory=LossConfig)
    method: str = "ours-mi-fgsm"
    seed: int = 0
    registry: TransformRegistry = field(default_factory=TransformRegistry)
    equal_blocks: bool = False

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.iterations < 1 or self.copies < 1:
            raise ValueError("iterations and copies must be >= 1")
        if self.mu < 0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")
        if self.method not in ATTACK_METHODS:
            raise ValueError(f"method must be one of {ATTACK_METHODS}, got {self.method!r}")


@dataclass
class IterationRecord:
    iteration: int
    loss_feature: float
    loss_aux: float
    loss_total: float
    grad_l1: float
    delta_linf: float
    adv_min: float
    adv_max: float
    grad_skipped: bool = False


@dataclass
class AttackTrace:
    example_id: int
    method: str
    epsilon: float
    records: list[IterationRecord] = field(default_factory=list)


@dataclass
class BatchAttackResult:
    patches: PatchSet
    traces: list[AttackTrace]
    failures: list[tuple[int, str]]


def momentum_update(m: np.ndarray, g: np.ndarray, mu: float):
    """One momentum step; skips normalization when the gradient L1 norm is 0.

    Returns (new momentum, grad L1 norm, skipped flag).
    """
    l1 = float(np.absolute(g).sum())
    dtype = m.dtype.type
    if l1 == 0.0:
        return dtype(mu) * m, 0.0, True
    return dtype(mu) * m + g / dtype(l1), l1, False


def _step_delta(delta: np.ndarray, m: np.ndarray, alpha: float, eps: float,
                x: np.ndarray) -> np.ndarray:
    """Signed step, budget clip, then valid-range clip so x + delta is in [0, 1]."""
    dtype = delta.dtype.type
    delta = np.clip(delta + dtype(alpha) * np.sign(m), dtype(-eps), dtype(eps))
    return np.clip(delta, -x, dtype(1.0) - x)


def _target_index(model, y) -> int:
    idx = int(np.searchsorted(model.classes_, int(y)))
    if idx >= model.classes_.size or model.classes_[idx] != int(y):
        raise ValueError(f"label {y} not among model classes {model.classes_.tolist()}")
    return idx


def _momentum_loop(x: np.ndarray, grad_fn, eps: float, alpha: float, mu: float,
                   iterations: int, trace: AttackTrace) -> np.ndarray:
    delta = np.zeros_like(x)
    m = np.zeros_like(x)
    for i in range(iterations):
        g, loss_feature, loss_aux, loss_total = grad_fn(x + delta, i)
        m, l1, skipped = momentum_update(m, g, mu)
        delta = _step_delta(delta, m, alpha, eps, x)
        adv = x + delta
        trace.records.append(IterationRecord(
            iteration=i,
            loss_feature=loss_feature,
            loss_aux=loss_aux,
            loss_total=loss_total,
            grad_l1=l1,
            delta_linf=float(np.absolute(delta).max()),
            adv_min=float(adv.min()),
            adv_max=float(adv.max()),
            grad_skipped=skipped,
        ))
    return x + delta


def fgsm(x, y, model, epsilon: float) -> np.ndarray:
    """Single-step sign attack: clip01(x + eps * sign(d CE(f(x), y) / dx))."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    x = check_patch(x).astype(np.float32, copy=False)
    target = _target_index(model, y)
    u = ad.Tensor(x, requires_grad=True)
    logits, _ = model.forward_with_tap(ad.reshape(u, (1,) + x.shape), tap=1)
    ad.softmax_cross_entropy(logits, np.array([target])).backward()
    step = np.float32(epsilon) * np.sign(u.grad)
    return np.clip(x + step, np.float32(0.0), np.float32(1.0))


def mi_fgsm(x, y, model, epsilon: float, alpha: float = 2.0 / 255.0,
            mu: float = 1.0, iterations: int = 20) -> np.ndarray:
    """Momentum-iterative sign attack on the label cross-entropy."""
    x = check_patch(x).astype(np.float32, copy=False)
    trace = AttackTrace(0, "mi-fgsm", epsilon)
    grad_fn = _baseline_grad_fn(model, _target_index(model, y))
    return _momentum_loop(x, grad_fn, epsilon, alpha, mu, iterations, trace)


def _baseline_grad_fn(model, target: int, tap: int = 1):
    targets = np.array([target])

    def grad_fn(x_adv: np.ndarray, iteration: int):
        u = ad.Tensor(x_adv, requires_grad=True)
        logits, _ = model.forward_with_tap(ad.reshape(u, (1,) + x_adv.shape), tap=tap)
        loss = ad.softmax_cross_entropy(logits, targets)
        loss.backward()
        value = float(loss.data)
        return u.grad, 0.0, value, value

    return grad_fn


def _transformed_grad_fn(model, ref, cfg: AttackConfig):
    def grad_fn(x_adv: np.ndarray, iteration: int):
        u = ad.Tensor(x_adv, requires_grad=True)
        copies = make_copies(
            u, cfg.copies, cfg.spatial_divisions, cfg.spectral_divisions,
            seed=cfg.seed, registry=cfg.registry, iteration=iteration,
            equal_blocks=cfg.equal_blocks,
        )
        batch = ad.stack(copies)
        logits, features = model.forward_with_tap(batch, tap=cfg.loss.tap)
        total, loss_feature, loss_aux = loss_from_reference(logits, features, ref, cfg.loss)
        total.backward()
        return u.grad, loss_feature, loss_aux, float(total.data)

    return grad_fn


def attack_example(x, y, surrogate, cfg: AttackConfig,
                   example_id: int = 0) -> tuple[np.ndarray, AttackTrace]:
    """Attack one (C, h, h) patch; returns the adversarial patch and its trace.

    Deterministic under cfg.seed.  The true label ``y`` only enters the
    baseline methods; the transformed feature-distancing methods target the
    clean prediction instead and accept ``y=None``.
    """
    x = check_patch(x).astype(np.float32, copy=False)
    check_unit_range(x, "x")
    trace = AttackTrace(example_id, cfg.method, cfg.epsilon)

    if cfg.method in ("fgsm", "mi-fgsm"):
        grad_fn = _baseline_grad_fn(surrogate, _target_index(surrogate, y))
        if cfg.method == "fgsm":
            adv = _momentum_loop(x, grad_fn, cfg.epsilon, cfg.epsilon, 0.0, 1, trace)
        else:
            adv = _momentum_loop(x, grad_fn, cfg.epsilon, cfg.alpha, cfg.mu,
                                 cfg.iterations, trace)
        return adv, trace

    ref = clean_reference(surrogate, x, cfg.loss)
    grad_fn = _transformed_grad_fn(surrogate, ref, cfg)
    if cfg.method == "ours-fgsm":
        adv = _momentum_loop(x, grad_fn, cfg.epsilon, cfg.epsilon, 0.0, 1, trace)
    else:
        adv = _momentum_loop(x, grad_fn, cfg.epsilon, cfg.alpha, cfg.mu,
                             cfg.iterations, trace)
    return adv, trace


def attack_batch(patches: PatchSet, surrogate, cfg: AttackConfig,
                 parallelism: int = 1) -> BatchAttackResult:
    """Attack every patch; output order matches input order.

    Per-example seeds are derived from (cfg.seed, example index), so results
    do not depend on the worker count.  A failing example keeps its clean
    values and is recorded in ``failures``.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    n = len(patches)
    adv_values = np.array(patches.values)
    traces: list[AttackTrace | None] = [None] * n
    failures: list[tuple[int, str]] = []

    def work(i: int):
        cfg_i = replace(cfg, seed=derive_seed(cfg.seed, ATTACK, i))
        return attack_example(patches.values[i], int(patches.labels[i]),
                              surrogate, cfg_i, example_id=i)

    if n:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            for i, outcome in enumerate(pool.map(_guarded(work), range(n))):
                if isinstance(outcome, Exception):
                    failures.append((i, f"{type(outcome).__name__}: {outcome}"))
                    traces[i] = AttackTrace(i, cfg.method, cfg.epsilon)
                else:
                    adv_values[i], traces[i] = outcome
    return BatchAttackResult(patches.replace_values(adv_values), traces, failures)


def _guarded(fn):
    def run(i):
        try:
            return fn(i)
        except Exception as exc:  # recorded per example; the batch continues
            return exc

    return run


def write_traces_csv(traces, path) -> None:
    """Trace CSV: example_id, iteration, L_F, L_A, L_total, grad_l1, delta_linf."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["example_id", "iteration", "L_F", "L_A", "L_total",
                         "grad_l1", "delta_linf"])
        for trace in traces:
            for rec in trace.records:
                writer.writerow([
                    trace.example_id, rec.iteration,
                    f"{rec.loss_feature:.8g}", f"{rec.loss_aux:.8g}",
                    f"{rec.loss_total:.8g}", f"{rec.grad_l1:.8g}",
                    f"{rec.delta_linf:.8g}",
                ])
