"""In-process simulation of a data-parallel cluster.

Workers are written as generators that ``yield`` a :class:`Collective`
request and receive its result.  The same worker code runs either on one
thread per rank (:func:`run_threads`, collectives are barrier rendezvous
points) or interleaved in a single context (:func:`run_lockstep`).  Both
paths combine contributions with the same functions, in rank order, so
they produce bitwise identical results.
"""
import threading
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ProtocolError

OPS = ("allreduce", "allgather", "broadcast")


@dataclass(frozen=True)
class Collective:
    op: str
    tag: str
    payload: object
    root: int = 0


@dataclass
class TrafficCounters:
    calls: Counter = field(default_factory=Counter)
    tagged_calls: Counter = field(default_factory=Counter)
    volume: Counter = field(default_factory=Counter)

    @property
    def element_volume(self):
        return sum(self.volume.values())

    def record(self, op, tag, elements):
        self.calls[op] += 1
        self.tagged_calls[op, tag] += 1
        self.volume[op] += int(elements)

    def snapshot(self):
        return {
            "allreduce_calls": self.calls["allreduce"],
            "allgather_calls": self.calls["allgather"],
            "broadcast_calls": self.calls["broadcast"],
            "element_volume": self.element_volume,
        }


# ----------------------------------------------------------- combiners --

def reduce_avg(contributions):
    """Elementwise mean of per-rank tensor lists, summed in rank order 0..W-1."""
    first = contributions[0]
    for rank, tensors in enumerate(contributions):
        if len(tensors) != len(first):
            raise ProtocolError(f"contributed {len(tensors)} tensors, rank 0 contributed {len(first)}", rank)
        for i, (t, ref) in enumerate(zip(tensors, first)):
            if np.shape(t) != np.shape(ref):
                raise ProtocolError(f"tensor {i} has shape {np.shape(t)}, rank 0 has {np.shape(ref)}", rank)
    world = len(contributions)
    out = []
    for i in range(len(first)):
        acc = np.array(contributions[0][i], dtype=np.float64, copy=True)
        for rank in range(1, world):
            acc += contributions[rank][i]
        out.append(acc / world)
    return out


def gather_table(contributions, expected=None):
    """Union of per-rank ``{key: value}`` dicts; every key must come from exactly one rank."""
    table = {}
    source = {}
    for rank, owned in enumerate(contributions):
        for key, value in owned.items():
            if key in table:
                raise ProtocolError(f"duplicate contribution for {key} (also from rank {source[key]})", rank)
            table[key] = value
            source[key] = rank
    if expected is not None:
        missing = [k for k in expected if k not in table]
        extra = [k for k in table if k not in set(expected)]
        if missing:
            raise ProtocolError(f"no rank contributed {missing}")
        if extra:
            raise ProtocolError(f"unexpected contributions {extra}", source[extra[0]])
    return table


def _eig_elements(value):
    q, lam = value.q, value.lam
    return q.size + lam.size


def _allreduce_elements(payload):
    return sum(np.size(t) for t in payload)


def _allgather_elements(table):
    total = 0
    for value in table.values():
        if hasattr(value, "q"):
            total += _eig_elements(value)
        else:
            total += int(np.size(value))
    return total


class SimCluster:
    """Collective-communication fabric for ``world_size`` in-process workers."""

    def __init__(self, world_size, timeout=30.0):
        if world_size < 1:
            raise ValueError("world_size must be at least 1")
        self.world_size = world_size
        self.timeout = timeout
        self.counters = TrafficCounters()
        self.expected_keys = None
        self._barrier = threading.Barrier(world_size, timeout=timeout)
        self._slots = [None] * world_size
        self._outcome = None

    # Shared by both execution modes; runs once per collective.
    def combine(self, requests):
        first = requests[0]
        for rank, req in enumerate(requests):
            if req is None:
                raise ProtocolError(f"finished while others entered {first.op}({first.tag})", rank)
            if (req.op, req.tag) != (first.op, first.tag):
                raise ProtocolError(
                    f"entered {req.op}({req.tag}) while rank 0 entered {first.op}({first.tag})", rank
                )
        if first.op == "allreduce":
            result = reduce_avg([r.payload for r in requests])
            elements = _allreduce_elements(first.payload)
        elif first.op == "allgather":
            result = gather_table([r.payload for r in requests], self.expected_keys)
            elements = _allgather_elements(result)
        elif first.op == "broadcast":
            result = requests[first.root].payload
            elements = int(np.size(result)) if not isinstance(result, dict) else len(result)
        else:
            raise ProtocolError(f"unknown collective {first.op!r}")
        self.counters.record(first.op, first.tag, elements)
        return result

    def execute(self, rank, request):
        """Blocking rendezvous used by :func:`run_threads`."""
        self._slots[rank] = request
        try:
            leader = self._barrier.wait() == 0
        except threading.BrokenBarrierError:
            raise ProtocolError(f"collective {request.op}({request.tag}) aborted or timed out", rank) from None
        if leader:
            try:
                self._outcome = (True, self.combine(list(self._slots)))
            except ProtocolError as exc:
                self._outcome = (False, exc)
        try:
            self._barrier.wait()
        except threading.BrokenBarrierError:
            raise ProtocolError(f"collective {request.op}({request.tag}) aborted or timed out", rank) from None
        ok, value = self._outcome
        if not ok:
            raise value
        return _private_copy(value)

    def abort(self):
        self._barrier.abort()

    def reset(self):
        """Re-arm the barrier after an aborted collective."""
        self._barrier = threading.Barrier(self.world_size, timeout=self.timeout)
        self._slots = [None] * self.world_size

    def allreduce_avg(self, rank, tensors, tag="grad"):
        return self.execute(rank, Collective("allreduce", tag, list(tensors)))

    def allgather(self, rank, owned, tag="eig"):
        return self.execute(rank, Collective("allgather", tag, dict(owned)))

    allgather_eigs = allgather

    def broadcast(self, rank, value, root=0, tag="bcast"):
        return self.execute(rank, Collective("broadcast", tag, value, root))


def _private_copy(value):
    if isinstance(value, list):
        return [np.array(v, copy=True) for v in value]
    if isinstance(value, dict):
        return dict(value)
    if isinstance(value, np.ndarray):
        return value.copy()
    return value


def run_lockstep(cluster, workers):
    """Drive worker generators in a single context, one collective round at a time."""
    world = cluster.world_size
    if len(workers) != world:
        raise ValueError(f"expected {world} workers, got {len(workers)}")
    results = [None] * world
    pending = [None] * world
    live = [True] * world
    for rank, gen in enumerate(workers):
        try:
            pending[rank] = next(gen)
        except StopIteration as stop:
            live[rank] = False
            results[rank] = stop.value
    while any(live):
        if not all(live):
            rank = live.index(False)
            first = pending[live.index(True)]
            raise ProtocolError(f"skipped collective {first.op}({first.tag})", rank)
        value = cluster.combine(pending)
        for rank, gen in enumerate(workers):
            try:
                pending[rank] = gen.send(_private_copy(value))
            except StopIteration as stop:
                live[rank] = False
                pending[rank] = None
                results[rank] = stop.value
    return results


def run_threads(cluster, workers):
    """Run each worker generator on its own thread; collectives block until all ranks arrive."""
    world = cluster.world_size
    if len(workers) != world:
        raise ValueError(f"expected {world} workers, got {len(workers)}")
    results = [None] * world
    errors = [None] * world

    def drive(rank, gen):
        try:
            request = next(gen)
            while True:
                value = cluster.execute(rank, request)
                request = gen.send(value)
        except StopIteration as stop:
            results[rank] = stop.value
        except BaseException as exc:  # noqa: BLE001 - re-raised in the caller
            errors[rank] = exc
            cluster.abort()

    threads = [threading.Thread(target=drive, args=(r, g), name=f"worker-{r}") for r, g in enumerate(workers)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    failed = [e for e in errors if e is not None]
    if failed:
        cluster.reset()
        # prefer the root cause over the secondary "aborted" errors it triggers
        primary = [e for e in failed if not (isinstance(e, ProtocolError) and "aborted" in str(e))]
        raise (primary or failed)[0]
    return results


# ------------------------------------------------------------ placement --

@dataclass(frozen=True)
class FactorSpec:
    layer_id: int
    kind: str
    n: int

    @property
    def key(self):
        return (self.layer_id, self.kind)

    @property
    def params(self):
        return self.n * self.n

    @property
    def cost(self):
        return self.n**3


@dataclass
class Assignment:
    factors: list
    owners: list
    world_size: int
    policy: str = "roundrobin"

    def owner_of(self, layer_id, kind):
        for f, o in zip(self.factors, self.owners):
            if f.key == (layer_id, kind):
                return o
        raise KeyError((layer_id, kind))

    def owned_by(self, rank):
        return [f for f, o in zip(self.factors, self.owners) if o == rank]

    def counts(self):
        c = [0] * self.world_size
        for o in self.owners:
            c[o] += 1
        return c

    def costs(self):
        c = [0] * self.world_size
        for f, o in zip(self.factors, self.owners):
            c[o] += f.cost
        return c

    def params(self):
        c = [0] * self.world_size
        for f, o in zip(self.factors, self.owners):
            c[o] += f.params
        return c


def factor_list(dims):
    """Factors in placement order (layer order, A before G) from per-layer ``(a_dim, g_dim)``."""
    factors = []
    for layer_id, (a_dim, g_dim) in enumerate(dims):
        factors.append(FactorSpec(layer_id, "A", int(a_dim)))
        factors.append(FactorSpec(layer_id, "G", int(g_dim)))
    return factors


def assign_round_robin(factors, world_size):
    if world_size < 1:
        raise ValueError("world_size must be at least 1")
    factors = list(factors)
    return Assignment(factors, [i % world_size for i in range(len(factors))], world_size, "roundrobin")


def assign_size_balanced(factors, world_size):
    """Longest-processing-time greedy on the ``n**3`` decomposition cost."""
    if world_size < 1:
        raise ValueError("world_size must be at least 1")
    factors = list(factors)
    order = sorted(range(len(factors)), key=lambda i: -factors[i].cost)
    load = [0] * world_size
    owners = [0] * len(factors)
    for i in order:
        rank = min(range(world_size), key=lambda r: (load[r], r))
        owners[i] = rank
        load[rank] += factors[i].cost
    return Assignment(factors, owners, world_size, "sized")


def assign(factors, world_size, policy="roundrobin"):
    if policy == "roundrobin":
        return assign_round_robin(factors, world_size)
    if policy == "sized":
        return assign_size_balanced(factors, world_size)
    raise ValueError(f"unknown placement policy {policy!r}")


@dataclass
class ImbalanceReport:
    world_size: int
    params: list
    costs: list
    speedups: list

    @property
    def min_params(self):
        return min(self.params)

    @property
    def max_params(self):
        return max(self.params)

    @property
    def min_speedup(self):
        return min(self.speedups)

    @property
    def max_speedup(self):
        return max(self.speedups)

    @property
    def max_cost(self):
        return max(self.costs)


def report_imbalance(assignment):
    """Per-worker parameter counts, ``n**3`` costs and speedup over one worker doing everything.

    A worker with no factors has infinite speedup.
    """
    costs = assignment.costs()
    total = sum(costs)
    speedups = [total / c if c > 0 else float("inf") for c in costs]
    return ImbalanceReport(assignment.world_size, assignment.params(), costs, speedups)
