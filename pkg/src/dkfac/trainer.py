"""Data-parallel training loop with the distributed K-FAC preconditioner.

Per iteration every worker runs forward/backward on its shard and the
gradients are allreduced.  On factor iterations the running factors are
updated locally and allreduced; on decomposition iterations each worker
eigendecomposes the factors it owns and the results are allgathered.
All other iterations precondition with the cached (possibly stale)
decompositions and communicate gradients only.
"""
import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import dist, kfac, linalg, nn
from .data import shard_batches
from .errors import ConsistencyError
from .kfac import KfacConfig

OPTIMIZERS = ("sgd", "kfac+sgd")
MODES = ("threads", "lockstep")


@dataclass
class TrainConfig:
    epochs: int = 1
    global_batch: int = 32
    base_lr: float = 0.1
    # multiply base_lr by world_size (per-worker learning rate semantics)
    scale_lr: bool = False
    warmup_epochs: int = 5
    lr_milestones: tuple = (25, 35, 40, 45, 50)
    lr_decay: float = 0.1
    momentum: float = 0.9
    label_smoothing: float = 0.1
    seed: int = 0
    optimizer: str = "kfac+sgd"
    world_size: int = 1
    model: str = "mlp"
    hidden: tuple = (64, 64)
    mode: str = "threads"
    kfac: KfacConfig = field(default_factory=KfacConfig)

    def __post_init__(self):
        self.lr_milestones = tuple(sorted(int(m) for m in self.lr_milestones))
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.world_size < 1:
            raise ValueError("world_size must be at least 1")
        if self.global_batch < 1 or self.global_batch % self.world_size:
            raise ValueError("global_batch must be a positive multiple of world_size")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be non-negative")
        if self.lr_milestones and self.warmup_epochs >= self.lr_milestones[0]:
            raise ValueError("warmup must finish before the first learning-rate milestone")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @property
    def use_kfac(self):
        return self.optimizer == "kfac+sgd"


@dataclass
class MetricsRow:
    epoch: int
    iteration: int
    train_loss: float
    train_acc: float
    val_acc: float
    lr: float
    damping: float
    decomp_interval: int
    allreduce_calls: int
    allgather_calls: int
    element_volume: int
    wall_ms: float


METRIC_FIELDS = tuple(f.name for f in fields(MetricsRow))


def lr_at(config, epoch, iteration, iters_per_epoch):
    """Learning rate for global ``iteration`` (which falls in ``epoch``).

    Linear warmup from ``base / warmup_iters`` up to ``base`` over the
    warmup epochs, then a step decay at every milestone reached.
    """
    base = config.base_lr * (config.world_size if config.scale_lr else 1)
    warmup_iters = config.warmup_epochs * iters_per_epoch
    if iteration < warmup_iters:
        return base * (iteration + 1) / warmup_iters
    passed = sum(1 for m in config.lr_milestones if epoch >= m)
    return base * config.lr_decay**passed


def evaluate(model, dataset, batch_size=1024):
    """Fraction of samples whose arg-max logit matches the label."""
    if len(dataset) == 0:
        raise ValueError("validation set is empty")
    correct = 0
    for start in range(0, len(dataset), batch_size):
        z = nn.logits(model, dataset.inputs[start : start + batch_size])
        correct += int(np.sum(np.argmax(z, axis=1) == dataset.labels[start : start + batch_size]))
    return correct / len(dataset)


def apply_momentum(weights, buffers, steps, lr, momentum):
    """``buf <- momentum * buf + step``; ``w <- w - lr * buf`` (steps already nu-scaled)."""
    for w, buf, step in zip(weights, buffers, steps):
        buf *= momentum
        buf += step
        w -= lr * buf


class Worker:
    """One rank: a model replica, its K-FAC layer states and momentum buffers."""

    def __init__(self, rank, model, assignment):
        self.rank = rank
        self.model = model
        self.assignment = assignment
        self.states = []
        for i in range(len(model.weights)):
            self.states.append(
                kfac.LayerKfacState(
                    layer_id=i,
                    a_owner=assignment.owner_of(i, "A"),
                    g_owner=assignment.owner_of(i, "G"),
                )
            )
        self.buffers = [np.zeros_like(w) for w in model.weights]

    def iteration(self, xb, yb, k, sched, lr, config):
        """Generator for one training iteration; yields collective requests."""
        loss, cap = nn.forward(self.model, xb, yb, config.label_smoothing)
        grads = nn.backward(self.model, cap)
        correct = int(np.sum(np.argmax(cap.logits, axis=1) == yb))
        grads = yield dist.Collective("allreduce", "grad", grads)
        nu = 1.0
        steps = grads
        if config.use_kfac:
            kc = config.kfac
            if sched.is_factor_iteration(k):
                local = []
                for st, lc in zip(self.states, cap.layers):
                    a_batch, g_batch = kfac.batch_factors(lc)
                    local.append(kfac.running_average(st.a_factor, a_batch, kc.running_avg))
                    local.append(kfac.running_average(st.g_factor, g_batch, kc.running_avg))
                averaged = yield dist.Collective("allreduce", "factor", local)
                for i, st in enumerate(self.states):
                    st.a_factor = kfac.symmetrize(averaged[2 * i])
                    st.g_factor = kfac.symmetrize(averaged[2 * i + 1])
                    st.updates += 1
            if kc.method == "eigen" and sched.is_decomp_iteration(k):
                owned = {}
                for f in self.assignment.owned_by(self.rank):
                    st = self.states[f.layer_id]
                    owned[f.key] = linalg.sym_eig(st.a_factor if f.kind == "A" else st.g_factor)
                table = yield dist.Collective("allgather", "eig", owned)
                for st in self.states:
                    st.a_eig = table[(st.layer_id, "A")]
                    st.g_eig = table[(st.layer_id, "G")]
            steps = [kfac.precondition(st, g, sched.damping, kc.method) for st, g in zip(self.states, grads)]
            nu = kfac.scale_grads(steps, grads, lr, kc.kl_clip)
        apply_momentum(self.model.weights, self.buffers, steps, lr, config.momentum)
        return loss, correct, len(yb), nu


def _fingerprint(worker):
    parts = [w.tobytes() for w in worker.model.weights]
    parts += [b.tobytes() for b in worker.buffers]
    for st in worker.states:
        for m in (st.a_factor, st.g_factor):
            parts.append(b"" if m is None else m.tobytes())
        for e in (st.a_eig, st.g_eig):
            parts.append(b"" if e is None else e.q.tobytes() + e.lam.tobytes())
    return parts


class Trainer:
    def __init__(self, config, train_set, val_set=None, model=None):
        self.config = config
        self.train_set = train_set
        self.val_set = val_set
        if model is None:
            model = nn.build_model(
                config.model, train_set.sample_shape, train_set.n_classes, config.hidden, config.seed
            )
        self.cluster = dist.SimCluster(config.world_size)
        dims = [(w.shape[1], w.shape[0]) for w in model.weights]
        self.factors = dist.factor_list(dims)
        self.assignment = dist.assign(self.factors, config.world_size, config.kfac.placement)
        self.cluster.expected_keys = [f.key for f in self.factors]
        self.workers = [Worker(r, model.clone(), self.assignment) for r in range(config.world_size)]
        self.iteration = 0
        self.history = []

    @property
    def model(self):
        return self.workers[0].model

    @property
    def iters_per_epoch(self):
        return len(self.train_set) // self.config.global_batch

    def train_step(self, shards, epoch):
        """Run one synchronous iteration over per-rank ``(inputs, labels)`` shards."""
        cfg = self.config
        k = self.iteration
        sched = kfac.apply_schedules(cfg.kfac, epoch)
        lr = lr_at(cfg, epoch, k, self.iters_per_epoch)
        start = time.perf_counter()
        gens = [w.iteration(x, y, k, sched, lr, cfg) for w, (x, y) in zip(self.workers, shards)]
        runner = dist.run_threads if cfg.mode == "threads" else dist.run_lockstep
        results = runner(self.cluster, gens)
        wall_ms = (time.perf_counter() - start) * 1e3
        self.check_replicas()
        total = sum(r[2] for r in results)
        loss = 0.0
        for r in results:
            loss += r[0]
        loss /= len(results)
        acc = sum(r[1] for r in results) / total
        self.iteration += 1
        c = self.cluster.counters.snapshot()
        return MetricsRow(
            epoch=epoch,
            iteration=k,
            train_loss=loss,
            train_acc=acc,
            val_acc=math.nan,
            lr=lr,
            damping=sched.damping,
            decomp_interval=sched.decomp_interval,
            allreduce_calls=c["allreduce_calls"],
            allgather_calls=c["allgather_calls"],
            element_volume=c["element_volume"],
            wall_ms=wall_ms,
        )

    def check_replicas(self):
        ref = _fingerprint(self.workers[0])
        for w in self.workers[1:]:
            if _fingerprint(w) != ref:
                raise ConsistencyError(f"replica on rank {w.rank} diverged from rank 0")

    def run(self, on_row=None):
        cfg = self.config
        if self.iters_per_epoch == 0:
            raise ValueError("training set is smaller than one global batch")
        for epoch in range(cfg.epochs):
            rows = []
            for shards in shard_batches(self.train_set, epoch, cfg.global_batch, cfg.world_size, cfg.seed):
                rows.append(self.train_step(shards, epoch))
            if self.val_set is not None and len(self.val_set):
                rows[-1].val_acc = evaluate(self.model, self.val_set)
            for row in rows:
                self.history.append(row)
                if on_row is not None:
                    on_row(row)
        return self.history

    def train_loss(self, dataset=None, batch_size=1024):
        """Mean smoothed cross-entropy of the current model over a whole dataset."""
        ds = dataset if dataset is not None else self.train_set
        total = 0.0
        for start in range(0, len(ds), batch_size):
            xb = ds.inputs[start : start + batch_size]
            loss, _ = nn.forward(self.model, xb, ds.labels[start : start + batch_size], self.config.label_smoothing)
            total += loss * xb.shape[0]
        return total / len(ds)


def expected_traffic(factors, n_params, iterations, factor_interval, decomp_interval, start=0):
    """Closed-form collective counts and element volumes for an eigen-path K-FAC run."""
    iters = range(start, start + iterations)
    factor_iters = sum(1 for k in iters if k % factor_interval == 0 or k % decomp_interval == 0)
    decomp_iters = sum(1 for k in iters if k % decomp_interval == 0)
    factor_elems = sum(f.n * f.n for f in factors)
    eig_elems = sum(f.n * f.n + f.n for f in factors)
    return {
        "grad_allreduce": iterations,
        "factor_allreduce": factor_iters,
        "eig_allgather": decomp_iters,
        "allreduce_calls": iterations + factor_iters,
        "allgather_calls": decomp_iters,
        "element_volume": iterations * n_params + factor_iters * factor_elems + decomp_iters * eig_elems,
    }
