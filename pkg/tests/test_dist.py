import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dkfac import dist, linalg
from dkfac.errors import ProtocolError

RUNNERS = [dist.run_lockstep, dist.run_threads]


def allreduce_worker(tensors, tag="grad"):
    out = yield dist.Collective("allreduce", tag, tensors)
    return out


def run(runner, world, workers, timeout=5.0):
    cluster = dist.SimCluster(world, timeout=timeout)
    return cluster, runner(cluster, workers)


@pytest.mark.parametrize("runner", RUNNERS)
class TestAllreduce:
    def test_constant_input(self, runner):
        _, res = run(runner, 4, [allreduce_worker([np.array([1.0, 2.0, 3.0])]) for _ in range(4)])
        for r in res:
            np.testing.assert_array_equal(r[0], [1.0, 2.0, 3.0])

    def test_two_ranks(self, runner):
        _, res = run(runner, 2, [allreduce_worker([np.array([0.0])]), allreduce_worker([np.array([2.0])])])
        assert [r[0].tolist() for r in res] == [[1.0], [1.0]]

    def test_fixed_order_sum(self, runner, rng):
        vecs = [rng.standard_normal(7) for _ in range(3)]
        want = ((vecs[0] + vecs[1]) + vecs[2]) / 3
        outs = []
        for _ in range(2):
            cluster, res = run(runner, 3, [allreduce_worker([v]) for v in vecs])
            outs.append([r[0].tobytes() for r in res])
        assert outs[0] == outs[1]
        assert len(set(outs[0])) == 1
        assert outs[0][0] == want.tobytes()
        assert cluster.counters.calls["allreduce"] == 1
        assert cluster.counters.element_volume == 7

    def test_shape_mismatch_names_rank(self, runner):
        workers = [allreduce_worker([np.zeros(2)]), allreduce_worker([np.zeros(3)])]
        with pytest.raises(ProtocolError) as info:
            run(runner, 2, workers)
        assert info.value.rank == 1

    def test_results_are_private(self, runner):
        _, res = run(runner, 2, [allreduce_worker([np.ones(2)]) for _ in range(2)])
        res[0][0][0] = 99.0
        assert res[1][0][0] == 1.0


def gather_worker(owned):
    table = yield dist.Collective("allgather", "eig", owned)
    return table


@pytest.mark.parametrize("runner", RUNNERS)
class TestAllgather:
    def eig(self, n, seed):
        r = np.random.default_rng(seed)
        x = r.standard_normal((n, n))
        return linalg.sym_eig(x @ x.T)

    def test_single_rank(self, runner):
        owned = {(0, "A"): self.eig(3, 0)}
        _, res = run(runner, 1, [gather_worker(owned)])
        assert res[0] == owned

    def test_two_ranks_volume(self, runner):
        eigs = {(i, k): self.eig(2 + i, i) for i in range(2) for k in "AG"}
        keys = list(eigs)
        parts = [{k: eigs[k] for k in keys[:2]}, {k: eigs[k] for k in keys[2:]}]
        cluster = dist.SimCluster(2, timeout=5.0)
        cluster.expected_keys = keys
        res = runner(cluster, [gather_worker(p) for p in parts])
        assert set(res[0]) == set(res[1]) == set(keys)
        assert cluster.counters.element_volume == sum(e.n**2 + e.n for e in eigs.values())

    def test_duplicate(self, runner):
        e = self.eig(2, 0)
        with pytest.raises(ProtocolError):
            run(runner, 2, [gather_worker({(0, "A"): e}), gather_worker({(0, "A"): e})])

    def test_missing(self, runner):
        cluster = dist.SimCluster(2, timeout=5.0)
        cluster.expected_keys = [(0, "A"), (0, "G")]
        with pytest.raises(ProtocolError):
            runner(cluster, [gather_worker({(0, "A"): self.eig(2, 0)}), gather_worker({})])


class TestProtocol:
    def skipper(self, skip):
        def worker():
            yield dist.Collective("allreduce", "grad", [np.ones(1)])
            if not skip:
                yield dist.Collective("allreduce", "factor", [np.ones(1)])
            return "done"

        return worker()

    def test_lockstep_detects_skip(self):
        with pytest.raises(ProtocolError) as info:
            run(dist.run_lockstep, 3, [self.skipper(r == 1) for r in range(3)])
        assert info.value.rank == 1

    def test_threads_detect_skip(self):
        with pytest.raises(ProtocolError):
            run(dist.run_threads, 3, [self.skipper(r == 1) for r in range(3)], timeout=0.5)

    @pytest.mark.parametrize("runner", RUNNERS)
    def test_mismatched_collectives(self, runner):
        def w(tag):
            yield dist.Collective("allreduce", tag, [np.ones(1)])

        with pytest.raises(ProtocolError):
            run(runner, 2, [w("grad"), w("factor")])

    def test_cluster_reusable_after_failure(self):
        cluster = dist.SimCluster(2, timeout=0.5)
        with pytest.raises(ProtocolError):
            dist.run_threads(cluster, [self.skipper(False), self.skipper(True)])
        res = dist.run_threads(cluster, [self.skipper(False), self.skipper(False)])
        assert res == ["done", "done"]

    def test_broadcast(self):
        def w(rank):
            v = yield dist.Collective("broadcast", "bcast", np.full(2, float(rank)), root=1)
            return v

        _, res = run(dist.run_lockstep, 3, [w(r) for r in range(3)])
        for r in res:
            np.testing.assert_array_equal(r, [1.0, 1.0])

    def test_modes_identical(self, rng):
        data = [[rng.standard_normal((3, 2)), rng.standard_normal(4)] for _ in range(4)]

        def w(rank):
            out = yield dist.Collective("allreduce", "grad", data[rank])
            out2 = yield dist.Collective("allreduce", "grad", [o * (rank + 1) for o in out])
            return out2

        a = run(dist.run_lockstep, 4, [w(r) for r in range(4)])
        b = run(dist.run_threads, 4, [w(r) for r in range(4)])
        assert [[x.tobytes() for x in r] for r in a[1]] == [[x.tobytes() for x in r] for r in b[1]]
        assert a[0].counters.snapshot() == b[0].counters.snapshot()


class TestPlacement:
    def test_order(self):
        f = dist.factor_list([(3, 2), (5, 4)])
        assert [(x.layer_id, x.kind, x.n) for x in f] == [(0, "A", 3), (0, "G", 2), (1, "A", 5), (1, "G", 4)]

    def test_round_robin_examples(self):
        two = dist.factor_list([(2, 2)] * 2)
        assert dist.assign_round_robin(two, 4).counts() == [1, 1, 1, 1]
        assert dist.assign_round_robin(two, 8).counts() == [1, 1, 1, 1, 0, 0, 0, 0]
        assert dist.assign_round_robin(dist.factor_list([(2, 2)] * 3), 2).counts() == [3, 3]
        a = dist.assign_round_robin(two, 3)
        assert a.owner_of(0, "A") == 0 and a.owner_of(1, "G") == 0 and a.owner_of(0, "G") == 1

    def test_size_balanced_example(self):
        factors = [dist.FactorSpec(i // 2, "AG"[i % 2], 8 if i == 0 else 1) for i in range(8)]
        sized = dist.assign_size_balanced(factors, 2)
        assert sorted(sized.costs()) == [7, 512]
        assert sized.owned_by(sized.owners[0]) == factors[:1]
        rr = dist.assign_round_robin(factors, 2)
        assert max(rr.costs()) == 515 > max(sized.costs())

    def test_equal_sizes_balanced_counts(self):
        sized = dist.assign_size_balanced(dist.factor_list([(4, 4)] * 5), 3)
        assert sorted(sized.counts()) == [3, 3, 4]

    def test_report(self):
        rep = dist.report_imbalance(dist.assign_round_robin(dist.factor_list([(3, 5)]), 1))
        assert rep.speedups == [1.0]
        assert rep.params == [34] and rep.costs == [152]
        rep = dist.report_imbalance(dist.assign_round_robin(dist.factor_list([(3, 3)]), 2))
        assert rep.speedups == [2.0, 2.0]
        rep = dist.report_imbalance(dist.assign_round_robin(dist.factor_list([(3, 3)]), 3))
        assert rep.max_speedup == float("inf")

    def test_invalid(self):
        with pytest.raises(ValueError):
            dist.assign([], 0)
        with pytest.raises(ValueError):
            dist.assign([], 2, "random")

    @settings(max_examples=100, deadline=None)
    @given(layers=st.integers(1, 12), world=st.integers(1, 24))
    def test_round_robin_balance_property(self, layers, world):
        counts = dist.assign_round_robin(dist.factor_list([(2, 3)] * layers), world).counts()
        assert sum(counts) == 2 * layers
        assert max(counts) - min(counts) <= 1
        if world <= 2 * layers:
            assert min(counts) >= 1

    @settings(max_examples=100, deadline=None)
    @given(sizes=st.lists(st.integers(1, 300), min_size=1, max_size=30), world=st.integers(1, 8))
    def test_size_balanced_property(self, sizes, world):
        factors = [dist.FactorSpec(i, "A", n) for i, n in enumerate(sizes)]
        sized = dist.assign_size_balanced(factors, world)
        assert len(sized.owners) == len(sizes) and all(0 <= o < world for o in sized.owners)
        # LPT bound: max load <= mean load + largest item
        total = sum(f.cost for f in factors)
        assert max(sized.costs()) <= total / world + max(f.cost for f in factors)
