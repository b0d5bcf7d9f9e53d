import numpy as np
import pytest

from conftest import StaticGroupImportance, make_services, random_importance, search_config
from src.agents.benchmark import latency_curve, latency_sweep, measure_root_node
from src.agents.blossom import latency_schedule
from src.agents.selection import CandidatePool, importance_filter, uniqueness
from src.errors import InfeasibleGoalError, ManifestError, PruningError
from src.main import initial_state, prune_step, run_archtree
from src.models.graph_models import Signature
from src.models.latency_models import AnalyticalModelParams
from src.models.search_models import Candidate, LatencyGoal, Node, StepPolicy, TrainConfig, Tree
from src.models.training_models import DatasetSpec
from src.tools.datasets import load_dataset
from src.tools.graph_ir import build_channel_groups
from src.tools.importance import FixedImportance
from src.tools.latency import AnalyticalLatencyProvider
from src.tools.zoo import dense_chain

# Small alignment and no fixed overheads, so toy widths can reach half the root latency.
TOY = AnalyticalModelParams(align=2, slant=0.2, kappa_dense=1e-3, kappa_conv=1e-4, layer_overhead_ms=0.0, base_ms=0.0)
POLICIES = ["sqrt", "log", "fixed:1", "fixed:2"]


def _random_chain(rng, hidden_groups=(2, 3), widths=(4, 12)):
    hidden = [int(w) for w in rng.integers(widths[0], widths[1] + 1, size=rng.choice(hidden_groups))]
    return dense_chain([5, *hidden, 3], seed=int(rng.integers(1000)))


def _run(model, importance_seed, cache_path=None, enabled=True, **overrides):
    groups = build_channel_groups(model)
    services = make_services(model, random_importance(groups, importance_seed), cache_path, enabled, TOY)
    bundles, report = run_archtree(model, search_config(**overrides), services)
    return bundles, report, services


def _trace(report):
    return [(s.alive, s.losses) for s in report.steps]


def _candidate(score, counts, order=0, parent=0):
    return Candidate(parent_id=parent, group=1, pruned=(0,), signature=Signature(counts=counts), step_loss=score,
                     score=score, latency_ms=1.0, order=order)


# =============================================================================
# Reference search, written without the engine's blossom and selection code
# =============================================================================

def _sqrt_delta(channels):
    delta = 1
    while delta * delta < channels:
        delta *= 2
    return delta


def _reference_child(counts, kept, group, vectors, tau, provider):
    """The child the blossom rules produce for one group, or None."""
    size = counts[group]
    local = vectors[group][kept[group]]
    removed = 0
    while size > 1:
        removed = min(removed + _sqrt_delta(size - removed), size - 1)
        pruned = np.argsort(local, kind="stable")[:removed]
        child = list(counts)
        child[group] = size - removed
        if provider.measure(None, Signature(counts=tuple(child))) <= tau:
            new_kept = list(kept)
            new_kept[group] = np.delete(kept[group], pruned)
            return tuple(child), new_kept, float(local[pruned].sum())
        if removed == size - 1:
            return None
    return None


def _schedule(tau0, goal, steps):
    return [latency_schedule(tau0, goal, steps, i) for i in range(1, steps + 1)]


def _prunable(groups):
    return [g.index for g in groups if g.prunable]


class TestCandidatePool:

    def test_importance_filter_keeps_the_lowest_scores(self):
        candidates = [_candidate(s, (4, c, 3)) for s, c in [(0.4, 1), (0.1, 2), (0.5, 3), (0.3, 4), (0.2, 5)]]
        assert [c.score for c in importance_filter(candidates, 3)] == [0.1, 0.2, 0.3]

    def test_ties_break_on_the_signature(self):
        candidates = [_candidate(0.1, (4, 6, 3)), _candidate(0.1, (4, 5, 3))]
        assert [c.signature.counts for c in importance_filter(candidates, 1)] == [(4, 5, 3)]

    def test_existing_signatures_are_dropped(self, chain):
        tree = Tree()
        tree.add(Node(id=0, signature=Signature(counts=(4, 5, 3)), model=chain, alive=False))
        kept = uniqueness([_candidate(0.1, (4, 5, 3)), _candidate(0.2, (4, 6, 3))], tree)
        assert [c.signature.counts for c in kept] == [(4, 6, 3)]

    def test_same_step_duplicates_keep_the_lowest_score(self):
        pool = CandidatePool(Tree(), alive=2)
        pool.offer(_candidate(0.3, (4, 5, 3), order=0))
        pool.offer(_candidate(0.2, (4, 5, 3), order=1, parent=1))
        pool.offer(_candidate(0.2, (4, 5, 3), order=2, parent=2))
        assert len(pool) == 1
        assert pool.dropped == 2
        assert pool.candidates()[0].parent_id == 1

    def test_threshold_is_armed_once_the_beam_is_full(self):
        pool = CandidatePool(Tree(), alive=2)
        pool.offer(_candidate(0.5, (4, 5, 3)))
        assert pool.threshold() is None
        pool.offer(_candidate(0.2, (4, 6, 3)))
        assert pool.threshold() == 0.5
        pool.offer(_candidate(0.1, (4, 7, 3)))
        assert pool.threshold() == 0.2


class TestRun:

    @pytest.mark.parametrize("seed", range(50))
    def test_budget_guarantee(self, seed):
        rng = np.random.default_rng(seed)
        model = _random_chain(rng)
        bundles, report, services = _run(
            model, seed, steps=int(rng.integers(2, 5)), alive=int(rng.integers(1, 5)),
            goal=LatencyGoal(fraction=float(rng.uniform(0.5, 0.8))), step_policy=StepPolicy.parse(rng.choice(POLICIES)),
        )
        assert bundles
        assert all(b.latency_ms <= report.goal_ms for b in bundles)
        probe = AnalyticalLatencyProvider(model, TOY)
        for record in report.steps:
            assert all(probe.measure(None, Signature(counts=tuple(s))) <= record.tau_ms for s in record.alive)

    def test_report_contents(self, small_mlp):
        bundles, report, services = _run(small_mlp, 0, steps=3, alive=2)
        assert report.root_signature == [6, 8, 8, 3]
        assert report.goal_ms == pytest.approx(0.5 * report.root_latency_ms)
        assert [s.tau_ms for s in report.steps] == report.schedule_ms
        assert report.schedule_ms[-1] == report.goal_ms
        assert [s.step for s in report.steps] == [1, 2, 3]
        assert report.provider_calls == services.provider.calls
        assert report.cache.misses + report.cache.hits == sum(s.probes for s in report.steps)
        assert [b.rank for b in bundles] == list(range(1, len(bundles) + 1))
        assert len(bundles) <= 2
        for bundle in bundles:
            assert bundle.parameters < report.root_parameters

    @staticmethod
    def _early_stopping_pair(seed):
        rng = np.random.default_rng(100 + seed)
        model = _random_chain(rng, hidden_groups=(3,), widths=(8, 16))
        options = dict(steps=int(rng.integers(2, 4)), alive=int(rng.integers(1, 3)),
                       step_policy=StepPolicy.parse(rng.choice(POLICIES)))
        return _run(model, seed, early_stopping=True, **options), _run(model, seed, early_stopping=False, **options)

    @pytest.mark.parametrize("seed", range(20))
    def test_early_stopping_does_not_change_the_search(self, seed):
        (on_bundles, on, _), (off_bundles, off, _) = self._early_stopping_pair(seed)
        assert _trace(on) == _trace(off)
        assert [b.signature for b in on_bundles] == [b.signature for b in off_bundles]
        assert on.provider_calls <= off.provider_calls

    def test_early_stopping_saves_provider_calls_overall(self):
        pairs = [self._early_stopping_pair(seed) for seed in range(20)]
        assert sum(on[1].provider_calls for on, _ in pairs) < sum(off[1].provider_calls for _, off in pairs)

    @pytest.mark.parametrize("seed", range(20))
    def test_beam_superset_at_step_one(self, seed):
        model = _random_chain(np.random.default_rng(seed))
        _, narrow, _ = _run(model, seed, steps=2, alive=1)
        _, wide, _ = _run(model, seed, steps=2, alive=3)
        assert narrow.steps[0].alive[0] in wide.steps[0].alive

    @pytest.mark.parametrize("seed", range(10))
    def test_best_leaf_matches_exhaustive_enumeration(self, seed):
        rng = np.random.default_rng(200 + seed)
        model = dense_chain([5, int(rng.integers(3, 9)), int(rng.integers(3, 9)), 3], seed=seed)
        groups = build_channel_groups(model)
        importance = random_importance(groups, seed)
        steps, fraction = int(rng.integers(1, 4)), float(rng.uniform(0.4, 0.8))

        provider = AnalyticalLatencyProvider(model, TOY)
        root = tuple(g.size for g in groups)
        tau0 = provider.measure(None, Signature(counts=root))
        schedule = _schedule(tau0, LatencyGoal(fraction=fraction).resolve(tau0), steps)
        frontier = [(root, [np.arange(g.size) for g in groups], 0.0)]
        for tau in schedule:
            frontier = [
                (child[0], child[1], loss + child[2])
                for counts, kept, loss in frontier
                for n in _prunable(groups)
                for child in [_reference_child(counts, kept, n, importance.vectors, tau, provider)]
                if child is not None
            ]

        services = make_services(model, importance, params=TOY)
        config = search_config(steps=steps, alive=64, goal=LatencyGoal(fraction=fraction))
        if not frontier:
            with pytest.raises(InfeasibleGoalError):
                run_archtree(model, config, services)
            return
        bundles, _ = run_archtree(model, config, services)
        assert bundles[0].cumulative_loss == pytest.approx(min(loss for _, _, loss in frontier))
        assert {tuple(b.signature) for b in bundles} == {counts for counts, _, _ in frontier}

    @pytest.mark.parametrize("seed", range(10))
    def test_single_beam_equals_greedy_search(self, seed):
        rng = np.random.default_rng(300 + seed)
        model = _random_chain(rng)
        groups = build_channel_groups(model)
        importance = random_importance(groups, seed)
        steps = int(rng.integers(2, 5))

        provider = AnalyticalLatencyProvider(model, TOY)
        counts = tuple(g.size for g in groups)
        tau0 = provider.measure(None, Signature(counts=counts))
        kept, total = [np.arange(g.size) for g in groups], 0.0
        for tau in _schedule(tau0, LatencyGoal(fraction=0.5).resolve(tau0), steps):
            children = [c for n in _prunable(groups)
                        for c in [_reference_child(counts, kept, n, importance.vectors, tau, provider)] if c is not None]
            counts, kept, loss = min(children, key=lambda c: (c[2], c[0]))
            total += loss

        bundles, _ = run_archtree(model, search_config(steps=steps, alive=1), make_services(model, importance, params=TOY))
        assert tuple(bundles[0].signature) == counts
        assert bundles[0].cumulative_loss == pytest.approx(total)

    def test_cache_is_transparent(self, small_mlp):
        cached, cached_report, _ = _run(small_mlp, 3, steps=3, alive=2)
        plain, plain_report, plain_services = _run(small_mlp, 3, enabled=False, steps=3, alive=2)
        assert _trace(cached_report) == _trace(plain_report)
        assert [(b.signature, b.latency_ms) for b in cached] == [(b.signature, b.latency_ms) for b in plain]
        assert plain_services.cache.stats().hits == 0

    def test_cumulative_filter(self, small_mlp):
        bundles, report, _ = _run(small_mlp, 5, steps=3, alive=2, filter_by="cumulative")
        assert all(b.latency_ms <= report.goal_ms for b in bundles)

    def test_goal_not_below_the_root_returns_the_root(self, small_mlp):
        bundles, report, services = _run(small_mlp, 0, goal=LatencyGoal(fraction=1.5))
        assert report.search_skipped
        assert report.steps == []
        assert [b.signature for b in bundles] == [[6, 8, 8, 3]]
        assert bundles[0].latency_ms == report.root_latency_ms

    def test_unreachable_goal(self, small_mlp):
        with pytest.raises(InfeasibleGoalError) as info:
            _run(small_mlp, 0, steps=1, goal=LatencyGoal(ms=1e-9))
        assert info.value.step == 1

    def test_unreachable_goal_fails_at_the_last_step(self, small_mlp):
        with pytest.raises(InfeasibleGoalError) as info:
            _run(small_mlp, 0, steps=2, goal=LatencyGoal(ms=1e-9))
        assert info.value.step == 2

    def test_root_node_marks_the_report_when_skipping(self, small_mlp):
        services = make_services(small_mlp, random_importance(build_channel_groups(small_mlp), 0), params=TOY)
        state = initial_state(small_mlp, search_config(goal=LatencyGoal(fraction=1.0)), services)
        update = measure_root_node(state)
        assert update["search_skipped"]
        assert update["report"].search_skipped
        assert update["schedule_ms"] == []

    def test_fixed_importance_drives_the_search(self, small_mlp):
        rng = np.random.default_rng(0)
        tensors = {f"{layer.id}.weight": rng.normal(size=small_mlp.weight(layer).shape)
                   for layer in small_mlp.layers if layer.is_prunable}
        services = make_services(small_mlp, FixedImportance(tensors), params=TOY)
        bundles, report = run_archtree(small_mlp, search_config(), services)
        assert bundles
        assert all(b.latency_ms <= report.goal_ms for b in bundles)
        assert all(s.importance_batches == 0 for s in report.steps)


class TestTree:

    def _grow(self, model, steps=3, alive=3, seed=0):
        groups = build_channel_groups(model)
        services = make_services(model, random_importance(groups, seed), params=TOY)
        state = initial_state(model, search_config(steps=steps, alive=alive), services)
        state.update(measure_root_node(state))
        history = [list(state["tree"].alive)]
        for _ in range(steps):
            prune_step(state)
            history.append(list(state["tree"].alive))
        return state["tree"], history

    @pytest.mark.parametrize("seed", range(5))
    def test_signatures_are_unique(self, seed):
        tree, _ = self._grow(dense_chain([5, 10, 10, 10, 3], seed=seed), seed=seed)
        signatures = [node.signature for node in tree.nodes.values()]
        assert len(signatures) == len(set(signatures))
        assert len(tree.registry) == len(tree.nodes)

    @pytest.mark.parametrize("seed", range(5))
    def test_parents_die(self, seed):
        tree, history = self._grow(dense_chain([5, 10, 10, 10, 3], seed=seed), seed=seed)
        for before, after in zip(history, history[1:]):
            assert not set(before) & set(after)
            assert all(not tree.nodes[node_id].alive for node_id in before)
        for node_id in history[-1]:
            node = tree.nodes[node_id]
            parent = tree.nodes[node.parent]
            assert node.cumulative_loss == pytest.approx(parent.cumulative_loss + node.step_loss)
            assert node.step == len(history) - 1

    def test_kept_channels_follow_the_pruned_model(self, small_mlp):
        tree, history = self._grow(small_mlp)
        for node_id in history[-1]:
            node = tree.nodes[node_id]
            assert [len(k) for k in node.kept] == list(node.signature.counts)
            assert node.model.weight(node.model.layer("fc1")).shape[0] == node.signature[1]


class TestFineTuning:

    def _services(self, model, workers):
        dataset = load_dataset(DatasetSpec(n_features=6, n_classes=3, n_samples=240, seed=1))
        services = make_services(model, params=TOY, dataset=dataset)
        services.workers = workers
        return services

    def _config(self, **overrides):
        train = TrainConfig(learning_rate=0.05, batch_size=16, batches_per_step=4)
        final = TrainConfig(learning_rate=0.05, batch_size=16, batches_per_step=8)
        return search_config(finetune=True, train=train, final_train=final, **overrides)

    def test_worker_count_does_not_change_results(self, small_mlp):
        one, _ = run_archtree(small_mlp, self._config(), self._services(small_mlp, 1))
        three, _ = run_archtree(small_mlp, self._config(), self._services(small_mlp, 3))
        assert [(b.signature, b.latency_ms, b.accuracy) for b in one] == \
            [(b.signature, b.latency_ms, b.accuracy) for b in three]
        for a, b in zip(one, three):
            for name in a.model.tensors:
                assert a.model.tensors[name].data.tobytes() == b.model.tensors[name].data.tobytes()

    def test_gradient_importance_counts_batches(self, small_mlp):
        bundles, report = run_archtree(small_mlp, self._config(), self._services(small_mlp, 1))
        assert all(s.importance_batches == 4 for s in report.steps)
        assert report.root_accuracy is not None
        assert all(0.0 <= b.accuracy <= 1.0 for b in bundles)
        accuracies = [b.accuracy for b in bundles]
        assert accuracies == sorted(accuracies, reverse=True)

    def test_root_weights_are_never_updated(self, small_mlp):
        before = {n: s.data.tobytes() for n, s in small_mlp.tensors.items()}
        run_archtree(small_mlp, self._config(), self._services(small_mlp, 1))
        assert {n: s.data.tobytes() for n, s in small_mlp.tensors.items()} == before

    def test_gradient_importance_needs_data(self, small_mlp):
        services = make_services(small_mlp, params=TOY)
        with pytest.raises(ManifestError, match="dataset"):
            run_archtree(small_mlp, self._config(), services)


class TestLatencyCurve:

    def _wide(self):
        model = dense_chain([8, 64, 8], relu_after=[], seed=0)
        return model, build_channel_groups(model)

    def test_fine_and_adaptive_sweeps(self):
        model, groups = self._wide()
        frame = latency_curve(model, groups, 1, AnalyticalLatencyProvider(model))
        fine = frame[frame["sweep"] == "fine"]
        adaptive = frame[frame["sweep"] == "adaptive"]
        assert list(fine["channels_left"]) == list(range(64, 0, -1))
        assert list(adaptive["channels_left"]) == [64, 56, 48, 40, 32, 24, 16, 12, 8, 4, 2, 1]
        assert set(adaptive["channels_left"]) <= set(fine["channels_left"])
        assert fine["ms"].is_monotonic_decreasing

    def test_adaptive_sweep_saves_provider_calls(self):
        model, groups = self._wide()
        fine, adaptive = AnalyticalLatencyProvider(model), AnalyticalLatencyProvider(model)
        latency_sweep(model, groups, 1, fine)
        latency_sweep(model, groups, 1, adaptive, StepPolicy())
        assert fine.calls / adaptive.calls >= 3

    def test_frozen_group(self):
        model, groups = self._wide()
        with pytest.raises(PruningError):
            latency_sweep(model, groups, 0, AnalyticalLatencyProvider(model))


def test_static_importance_is_path_independent(small_mlp):
    groups = build_channel_groups(small_mlp)
    source = StaticGroupImportance([np.arange(g.size, dtype=float) for g in groups])
    node = Node(id=3, signature=Signature(counts=(6, 5, 8, 3)), model=small_mlp,
                kept=[np.arange(6), np.array([0, 2, 4, 6, 7]), np.arange(8), np.arange(3)])
    assert list(source.group_importances(node, groups, None)[1]) == [0.0, 2.0, 4.0, 6.0, 7.0]
