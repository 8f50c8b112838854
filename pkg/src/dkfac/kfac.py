"""Kronecker-factored preconditioning of per-layer gradients.

Each trainable layer keeps running averages of two factors: ``A`` from the
layer inputs (with the bias column) and ``G`` from the per-sample output
gradients.  Gradients are preconditioned either through cached
eigendecompositions of the factors (the default) or through explicitly
inverted, individually damped factors.
"""
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import DimensionError, StateError

DENOM_FLOOR = 1e-12
FACTOR_INTERVAL_RATIO = 10
METHODS = ("eigen", "inverse")


@dataclass
class KfacConfig:
    damping: float = 0.001
    running_avg: float = 0.95
    kl_clip: float = 1e-3
    decomp_interval: int = 10
    # None derives the factor interval from the decomposition interval.
    factor_interval: int | None = None
    damping_decay: tuple = ()
    interval_decay: tuple = ()
    method: str = "eigen"
    placement: str = "roundrobin"

    def __post_init__(self):
        self.damping_decay = tuple((int(e), float(m)) for e, m in self.damping_decay)
        self.interval_decay = tuple((int(e), float(m)) for e, m in self.interval_decay)
        if not self.damping > 0:
            raise ValueError("damping must be positive")
        if not 0.0 < self.running_avg <= 1.0:
            raise ValueError("running_avg must lie in (0, 1]")
        if not self.kl_clip > 0:
            raise ValueError("kl_clip must be positive")
        if self.decomp_interval < 1:
            raise ValueError("decomp_interval must be a positive iteration count")
        if self.factor_interval is not None:
            if self.factor_interval < 1:
                raise ValueError("factor_interval must be a positive iteration count")
            if self.factor_interval > self.decomp_interval:
                raise ValueError("factor_interval must not exceed decomp_interval")
        for epoch, mult in self.damping_decay:
            if epoch < 0 or not 0.0 < mult <= 1.0:
                raise ValueError("damping_decay needs epochs >= 0 and multipliers in (0, 1]")
        for epoch, mult in self.interval_decay:
            if epoch < 0 or not mult > 0.0:
                raise ValueError("interval_decay needs epochs >= 0 and positive multipliers")
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.placement not in ("roundrobin", "sized"):
            raise ValueError("placement must be 'roundrobin' or 'sized'")


@dataclass(frozen=True)
class Schedule:
    damping: float
    decomp_interval: int
    factor_interval: int

    def is_factor_iteration(self, k):
        return k % self.factor_interval == 0 or k % self.decomp_interval == 0

    def is_decomp_iteration(self, k):
        return k % self.decomp_interval == 0


def apply_schedules(config, epoch):
    """Damping and update intervals in effect at ``epoch``.

    Every milestone at or before ``epoch`` applies its multiplier once.
    Unless set explicitly, factors refresh ten times as often as the
    decompositions.
    """
    damping = config.damping
    for milestone, mult in config.damping_decay:
        if epoch >= milestone:
            damping *= mult
    interval = float(config.decomp_interval)
    for milestone, mult in config.interval_decay:
        if epoch >= milestone:
            interval *= mult
    decomp = max(1, int(round(interval)))
    if config.factor_interval is None:
        factor = max(1, decomp // FACTOR_INTERVAL_RATIO)
    else:
        factor = min(config.factor_interval, decomp)
    return Schedule(damping=damping, decomp_interval=decomp, factor_interval=factor)


@dataclass
class LayerKfacState:
    layer_id: int
    a_factor: np.ndarray = None
    g_factor: np.ndarray = None
    a_eig: linalg.SymEig = None
    g_eig: linalg.SymEig = None
    a_owner: int = 0
    g_owner: int = 0
    updates: int = field(default=0, repr=False)

    @property
    def have_factors(self):
        return self.a_factor is not None and self.g_factor is not None

    @property
    def have_eigs(self):
        return self.a_eig is not None and self.g_eig is not None


def symmetrize(m):
    return 0.5 * (m + m.T)


def batch_factors(capture):
    """Batch estimates ``A = a^T a / rows`` and ``G = g^T g / rows`` for one layer."""
    if capture.g_out is None:
        raise StateError(f"layer {capture.layer}: backward() has not filled g_out")
    a, g = capture.a_prev, capture.g_out
    if a.shape[0] != g.shape[0]:
        raise DimensionError("a_prev and g_out must have the same number of rows")
    rows = a.shape[0]
    return symmetrize(a.T @ a / rows), symmetrize(g.T @ g / rows)


def running_average(previous, current, xi):
    if previous is None:
        return current.copy()
    if previous.shape != current.shape:
        raise DimensionError(f"factor shape changed from {previous.shape} to {current.shape}")
    return symmetrize(xi * current + (1.0 - xi) * previous)


def update_factors(state, capture, xi):
    """Fold one batch into the running factor averages (first batch seeds them)."""
    a_batch, g_batch = batch_factors(capture)
    if state.have_factors:
        expected = (state.a_factor.shape, state.g_factor.shape)
        if (a_batch.shape, g_batch.shape) != expected:
            raise DimensionError(f"layer {state.layer_id}: capture shapes do not match factors")
    state.a_factor = running_average(state.a_factor, a_batch, xi)
    state.g_factor = running_average(state.g_factor, g_batch, xi)
    state.updates += 1
    return state


def refresh_eigs(state):
    state.a_eig = linalg.sym_eig(state.a_factor)
    state.g_eig = linalg.sym_eig(state.g_factor)
    return state


def _check_grad(state, grad, rows, cols):
    if grad.shape != (rows, cols):
        raise DimensionError(
            f"layer {state.layer_id}: gradient shape {grad.shape} != factor shape {(rows, cols)}"
        )


def precondition_eigen(state, grad, damping):
    """``(G kron A + damping I)^-1 vec(grad)`` through the factor eigenbases."""
    if not state.have_eigs:
        raise StateError(f"layer {state.layer_id}: no eigendecompositions cached")
    qa, la = state.a_eig.q, state.a_eig.lam
    qg, lg = state.g_eig.q, state.g_eig.lam
    _check_grad(state, grad, qg.shape[0], qa.shape[0])
    v1 = qg.T @ grad @ qa
    v2 = v1 / np.maximum(np.outer(lg, la) + damping, DENOM_FLOOR)
    return qg @ v2 @ qa.T


def precondition_factored_inverse(state, grad, damping):
    """``(G + damping I)^-1 grad (A + damping I)^-1``."""
    if not state.have_factors:
        raise StateError(f"layer {state.layer_id}: factors have not been computed")
    a, g = state.a_factor, state.g_factor
    _check_grad(state, grad, g.shape[0], a.shape[0])
    g_inv = linalg.inverse(g + damping * np.eye(g.shape[0]))
    a_inv = linalg.inverse(a + damping * np.eye(a.shape[0]))
    return g_inv @ grad @ a_inv


def precondition(state, grad, damping, method="eigen"):
    if method == "eigen":
        return precondition_eigen(state, grad, damping)
    return precondition_factored_inverse(state, grad, damping)


def scale_grads(preconditioned, raw_grads, lr, kl_clip):
    """Scale preconditioned gradients in place by ``nu`` and return ``nu``.

    ``nu = min(1, sqrt(kl_clip / (lr**2 * sum_i |<P_i, g_i>|)))``; a zero
    denominator leaves the gradients untouched.
    """
    if len(preconditioned) != len(raw_grads):
        raise DimensionError("preconditioned and raw gradient lists differ in length")
    if lr <= 0 or kl_clip <= 0:
        raise ValueError("lr and kl_clip must be positive")
    vg = sum(abs(float(np.sum(p * g))) for p, g in zip(preconditioned, raw_grads))
    denom = lr * lr * vg
    if denom == 0.0:
        return 1.0
    nu = min(1.0, float(np.sqrt(kl_clip / denom)))
    if nu < 1.0:
        for p in preconditioned:
            p *= nu
    return nu
