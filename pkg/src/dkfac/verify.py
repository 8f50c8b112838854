"""Self-checks run by ``dkfac verify``: each compares a fast path to a slow oracle."""
import numpy as np

from . import _accel, data, dist, kfac, linalg, nn, trainer
from .kfac import KfacConfig


def _spd(rng, n):
    x = rng.standard_normal((n, n + 2))
    return x @ x.T / (n + 2) + 0.1 * np.eye(n)


def dense_eigen_oracle(a, g, grad, damping):
    block = linalg.curvature_block(a, g) + damping * np.eye(a.shape[0] * g.shape[0])
    return linalg.unvec(np.linalg.solve(block, linalg.vec(grad)), *grad.shape)


def dense_inverse_oracle(a, g, grad, damping):
    ai = np.linalg.inv(a + damping * np.eye(a.shape[0]))
    gi = np.linalg.inv(g + damping * np.eye(g.shape[0]))
    return linalg.unvec(linalg.kron(gi, ai) @ linalg.vec(grad), *grad.shape)


def check_kron_example():
    got = linalg.kron(np.array([[1, 2], [3, 4]]), np.array([[5, 6], [7, 8], [9, 0]]))
    want = np.array(
        [
            [5, 6, 10, 12],
            [7, 8, 14, 16],
            [9, 0, 18, 0],
            [15, 18, 20, 24],
            [21, 24, 28, 32],
            [27, 0, 36, 0],
        ]
    )
    return bool(np.array_equal(got, want)), "6x4 worked example"


def _state(a, g):
    st = kfac.LayerKfacState(0, a_factor=a, g_factor=g)
    return kfac.refresh_eigs(st)


def check_eigen_oracle(cases=40, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        a, g = _spd(rng, rng.integers(2, 9)), _spd(rng, rng.integers(2, 9))
        grad = rng.standard_normal((g.shape[0], a.shape[0]))
        st = _state(a, g)
        for damping in (0.0, 1e-3, 1.0):
            diff = np.abs(kfac.precondition_eigen(st, grad, damping) - dense_eigen_oracle(a, g, grad, damping))
            worst = max(worst, float(diff.max()))
    return worst <= 1e-8, f"max |eigen - dense| = {worst:.2e}"


def check_inverse_oracle(cases=40, seed=1):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        a, g = _spd(rng, rng.integers(2, 9)), _spd(rng, rng.integers(2, 9))
        grad = rng.standard_normal((g.shape[0], a.shape[0]))
        st = _state(a, g)
        for damping in (0.0, 1e-3, 1.0):
            got = kfac.precondition_factored_inverse(st, grad, damping)
            worst = max(worst, float(np.abs(got - dense_inverse_oracle(a, g, grad, damping)).max()))
    return worst <= 1e-8, f"max |inverse - dense| = {worst:.2e}"


def check_gradients(seed=0):
    rng = np.random.default_rng(seed)
    model = nn.mlp(4, (5,), 3, seed=seed)
    x = rng.standard_normal((6, 4))
    y = rng.integers(0, 3, 6)
    _, cap = nn.forward(model, x, y)
    grads = nn.backward(model, cap)
    h = 1e-5
    worst = 0.0
    for w, gw in zip(model.weights, grads):
        for idx in np.ndindex(w.shape):
            old = w[idx]
            w[idx] = old + h
            lp, _ = nn.forward(model, x, y)
            w[idx] = old - h
            lm, _ = nn.forward(model, x, y)
            w[idx] = old
            fd = (lp - lm) / (2 * h)
            worst = max(worst, abs(fd - gw[idx]) / max(abs(fd), abs(gw[idx]), 1e-8))
    return worst <= 1e-5, f"max relative error = {worst:.2e}"


def check_comm_accounting():
    ds = data.gen_synthetic(0, 64, 4, 3, 2.0)
    cfg = trainer.TrainConfig(
        epochs=5, global_batch=16, world_size=4, hidden=(4,), warmup_epochs=0, lr_milestones=(),
        kfac=KfacConfig(decomp_interval=3, factor_interval=1),
    )
    t = trainer.Trainer(cfg, ds)
    t.run()
    want = trainer.expected_traffic(t.factors, t.model.n_params, t.iteration, 1, 3)
    c = t.cluster.counters
    got = {
        "allreduce_calls": c.calls["allreduce"],
        "allgather_calls": c.calls["allgather"],
        "element_volume": c.element_volume,
    }
    ok = all(got[k] == want[k] for k in got)
    return ok, f"counters {got}"


def check_backend_parity(seed=0):
    rng = np.random.default_rng(seed)
    m = _spd(rng, 12)
    prev = _accel.backend()
    results = {}
    try:
        for name in ("numpy", "numba") if _accel.HAVE_NUMBA else ("numpy",):
            _accel.set_backend(name)
            results[name] = linalg.sym_eig(m).reconstruct()
    finally:
        _accel.set_backend(prev)
    vals = list(results.values())
    worst = max(float(np.abs(v - vals[0]).max()) for v in vals)
    return worst <= 1e-10, f"backends {sorted(results)} agree to {worst:.1e}"


def check_round_robin_balance():
    factors = dist.factor_list([(3, 2)] * 5)
    ok = True
    for w in range(1, 11):
        counts = dist.assign_round_robin(factors, w).counts()
        ok &= max(counts) - min(counts) <= 1 and min(counts) >= 1
    return ok, "every worker owns a factor for W <= 2L"


CHECKS = [
    ("kron worked example", check_kron_example),
    ("eigen path vs dense oracle", check_eigen_oracle),
    ("factored inverse vs dense oracle", check_inverse_oracle),
    ("finite-difference gradients", check_gradients),
    ("communication accounting", check_comm_accounting),
    ("numba/numpy kernel parity", check_backend_parity),
    ("round-robin balance", check_round_robin_balance),
]


def run_all(out=print):
    all_ok = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # noqa: BLE001 - reported as a failure
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        out(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return all_ok
