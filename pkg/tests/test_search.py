import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gnas.search as search_mod
from gnas.arch import (DescendantIndex, NetworkShape, enumerate_layer, make_architecture,
                       random_architecture, set_layer_uniform_parent, validate)
from gnas.data import SyntheticSpec, generate_synthetic
from gnas.errors import BudgetExhausted, EmptyDescendants
from gnas.nn import WeightStore, accuracy_per_attribute, live_connections
from gnas.search import (SearchConfig, SearchContext, block_reward, draw_valid,
                         evaluate_parent_candidate, finetune, mean_reward, run_search,
                         update_layer)

FROZEN = SearchConfig(train_iters_per_candidate=0, valid_batches=None)


# -- block_reward -----------------------------------------------------------

def _index(*layers):
    return DescendantIndex(tuple(tuple(frozenset(s) for s in layer) for layer in layers))


def test_block_reward_mean_of_descendants():
    acc = np.zeros(8)
    acc[3], acc[7] = 0.8, 0.6
    desc = _index([range(8)], [{3, 7}, {0, 1, 2, 4, 5, 6}])
    assert block_reward(acc, desc, 1, 0) == pytest.approx(0.7)


def test_block_reward_singleton_and_constant():
    acc = np.linspace(0.5, 0.9, 4)
    desc = _index([range(4)], [{0, 1}, {2, 3}], [{0}, {1}, {2}, {3}])
    assert [block_reward(acc, desc, 2, j) for j in range(4)] == list(acc)
    flat = np.full(4, 0.65)
    assert all(block_reward(flat, desc, k, b) == 0.65
               for k, layer in enumerate(desc.sets) for b in range(len(layer)))


def test_block_reward_empty_block():
    with pytest.raises(EmptyDescendants):
        block_reward(np.ones(2), _index([{0, 1}], [{0, 1}, set()]), 1, 1)


# -- evaluate_parent_candidate ---------------------------------------------

def test_frozen_candidate_is_plain_accuracy(small_data, shape124):
    store = WeightStore(shape124, seed=1)
    arch = random_architecture(shape124, 1)
    cand = set_layer_uniform_parent(arch, 1, 1)
    store.ensure(cand)
    before = store.checksum()
    r = evaluate_parent_candidate(shape124, arch, store, 1, 1, small_data, FROZEN)
    assert np.array_equal(r, accuracy_per_attribute(shape124, cand, store, [small_data.valid]))
    assert store.checksum() == before


def test_frozen_accuracy_depends_only_on_own_path(small_data, shape124):
    store = WeightStore(shape124, seed=2)
    arch = random_architecture(shape124, 0)
    r = [evaluate_parent_candidate(shape124, arch, store, 1, b, small_data, FROZEN)
         for b in range(2)]
    mixed = make_architecture(shape124, [list(arch.parents[0]), [0, 1, 1, 0]])
    r_mixed = accuracy_per_attribute(shape124, mixed, store, [small_data.valid])
    for n, b in enumerate(mixed.parents[1]):
        assert r_mixed[n] == r[b][n]


def test_candidate_evaluation_is_deterministic(small_data, shape124):
    cfg = SearchConfig(train_iters_per_candidate=5, valid_batches=2, rng_seed=4)
    arch = random_architecture(shape124, 4)
    results = []
    for _ in range(2):
        store = WeightStore(shape124, seed=4)
        ctx = SearchContext.create(small_data, cfg)
        results.append((evaluate_parent_candidate(shape124, arch, store, 1, 0, small_data,
                                                  cfg, ctx), store.checksum()))
    assert np.array_equal(results[0][0], results[1][0])
    assert results[0][1] == results[1][1]


def test_draw_valid_batches(small_data):
    rng = np.random.default_rng(0)
    batches = draw_valid(small_data.valid, SearchConfig(valid_batches=3, batch_size=64), rng)
    assert [len(b) for b in batches] == [64, 64, 64]
    whole = draw_valid(small_data.valid, FROZEN, rng)
    assert len(whole) == 1 and whole[0] is small_data.valid


# -- update_layer -----------------------------------------------------------

def _scripted_counts(monkeypatch, table):
    """Make candidate b score ``table[b]`` correct answers per attribute out of 10."""
    def fake(shape, arch, store, layer, parent, cfg, ctx, valid):
        ctx.candidates += 1
        return np.asarray(table[parent], dtype=np.int64), 10
    monkeypatch.setattr(search_mod, "_candidate_counts", fake)


def test_update_layer_argmax(monkeypatch, small_data, shape124):
    # child j of layer 2 carries attribute j: rewards column j = (table[0][j], table[1][j])
    _scripted_counts(monkeypatch, [[6, 7, 7, 9], [9, 7, 5, 9]])
    arch = make_architecture(shape124, [[0, 0], [1, 0, 1, 1]])
    new, table = update_layer(shape124, arch, WeightStore(shape124), 1, small_data, FROZEN)
    assert new.parents[1] == (1, 0, 0, 0)  # 0.6 < 0.9 picks 1; ties pick 0
    assert table.rewards[:, 0].tolist() == [0.6, 0.9]
    assert table.chosen_parents == (1, 0, 0, 0)


def test_update_layer_counts_candidates_and_keeps_dead_children(monkeypatch, small_data):
    shape = NetworkShape((1, 2, 3, 4), (8, 4, 4, 4), head_width=4)
    _scripted_counts(monkeypatch, [[1, 1, 1, 1], [9, 9, 9, 9]])
    arch = make_architecture(shape, [[0, 0], [0, 0, 1], [0, 0, 0, 0]])  # blocks 1, 2 of layer 2 dead
    ctx = SearchContext.create(small_data, FROZEN)
    new, table = update_layer(shape, arch, WeightStore(shape), 1, small_data, FROZEN, ctx)
    assert ctx.candidates == 2
    assert new.parents[1] == (1, 0, 1)
    assert np.isnan(table.rewards[:, 1:]).all() and table.rewards[:, 0].tolist() == [0.1, 0.9]


def test_update_layer_rejects_single_block_layer(small_data, shape124):
    with pytest.raises(ValueError):
        update_layer(shape124, random_architecture(shape124, 0), WeightStore(shape124), 0,
                     small_data, FROZEN)


def _best_over_layer(shape, arch, store, layer, batch):
    scored = [(mean_reward(shape, a, store, [batch]), a) for a in enumerate_layer(shape, arch, layer)]
    best = max(r for r, _ in scored)
    return best, [a for r, a in scored if r == best]


@pytest.mark.parametrize("blocks,layer", [((1, 2, 4), 1), ((1, 3, 4), 1),
                                          ((1, 2, 3, 4), 1), ((1, 2, 3, 4), 2)])
def test_update_layer_is_exact_with_frozen_weights(small_data, blocks, layer):
    shape = NetworkShape(blocks, (8,) + (3,) * (len(blocks) - 1), head_width=4)
    for seed in range(3):
        store = WeightStore(shape, seed=seed)
        arch = random_architecture(shape, seed + 10)
        new, _ = update_layer(shape, arch, store, layer, small_data, FROZEN)
        best, winners = _best_over_layer(shape, arch, store, layer, small_data.valid)
        assert mean_reward(shape, new, store, [small_data.valid]) == best
        if len(winners) == 1:
            assert new == winners[0]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 10**6), st.sampled_from([1, 2]))
def test_update_layer_never_lowers_reward(small_data, store_seed, arch_seed, layer):
    shape = NetworkShape((1, 2, 3, 4), (8, 3, 3, 3), head_width=4)
    store = WeightStore(shape, seed=store_seed)
    arch = random_architecture(shape, arch_seed)
    new, _ = update_layer(shape, arch, store, layer, small_data, FROZEN)
    before = mean_reward(shape, arch, store, [small_data.valid])
    assert mean_reward(shape, new, store, [small_data.valid]) >= before
    validate(shape, new)


# -- run_search -------------------------------------------------------------

def test_run_search_without_searchable_layers(small_data):
    shape = NetworkShape((1, 1, 4), (8, 3, 3), head_width=4)
    arch, store, trace = run_search(shape, small_data, SearchConfig())
    assert trace.num_candidates == 0 and trace.records == [] and trace.converged
    assert arch.parents == ((0,), (0, 0, 0, 0))


def test_large_shape_evaluates_twenty_candidates_per_round():
    data = generate_synthetic(SyntheticSpec(attrs_per_group=(10, 10, 10, 10), input_dim=8,
                                            latent_dim_per_group=2,
                                            samples=(64, 64, 8), rng_seed=0))
    shape = NetworkShape((1, 4, 16, 40), (8, 2, 2, 2), head_width=2)
    seen = []
    cfg = SearchConfig(train_iters_per_candidate=1, valid_batches=1, max_rounds=2,
                       convergence_patience=3)
    _, _, trace = run_search(shape, data, cfg, on_record=lambda r: seen.append(r.candidates))
    assert trace.num_candidates == 40
    assert [r.layer for r in trace.records] == [2, 1, 2, 1]
    assert seen == [16, 20, 36, 40]
    assert not trace.converged


def test_converged_search_is_a_per_layer_fixed_point(six_attr_data):
    shape = NetworkShape((1, 2, 3, 6), (8, 3, 3, 3), head_width=4)
    for seed in range(3):
        cfg = SearchConfig(train_iters_per_candidate=0, valid_batches=None, rng_seed=seed,
                           convergence_patience=1)
        arch, store, trace = run_search(shape, six_attr_data, cfg)
        assert trace.converged
        for layer in shape.searchable_layers():
            again, _ = update_layer(shape, arch, store, layer, six_attr_data, cfg)
            assert again == arch


def test_run_search_is_deterministic(six_attr_data):
    shape = NetworkShape((1, 2, 3, 6), (8, 3, 3, 3), head_width=4)
    cfg = SearchConfig(train_iters_per_candidate=5, valid_batches=2, max_rounds=3, rng_seed=11)
    a1, s1, t1 = run_search(shape, six_attr_data, cfg)
    a2, s2, t2 = run_search(shape, six_attr_data, cfg)
    assert a1 == a2 and s1.checksum() == s2.checksum()
    assert t1.to_jsonl(include_timing=False) == t2.to_jsonl(include_timing=False)


def test_trace_records_and_learning_rate_decay(six_attr_data):
    shape = NetworkShape((1, 2, 3, 6), (8, 3, 3, 3), head_width=4)
    cfg = SearchConfig(train_iters_per_candidate=2, valid_batches=1, max_rounds=3,
                       lr_decay_per_round=0.5, convergence_patience=5)
    _, _, trace = run_search(shape, six_attr_data, cfg)
    lines = [json.loads(s) for s in trace.to_jsonl().splitlines()]
    assert len(lines) == 6
    assert {"round", "layer", "rewards", "chosen_parents", "mean_reward",
            "elapsed_ms"} <= set(lines[0])
    assert [d["lr"] for d in lines] == [0.1, 0.1, 0.05, 0.05, 0.025, 0.025]
    for d in lines:
        flat = [v for row in d["rewards"] for v in row if v is not None]
        assert all(0 <= v <= 1 for v in flat)
        assert len(d["rewards"]) == shape.block_counts[d["layer"]]


def test_budget_exhausted_carries_state(six_attr_data):
    shape = NetworkShape((1, 2, 3, 6), (8, 3, 3, 3), head_width=4)
    cfg = SearchConfig(train_iters_per_candidate=1, valid_batches=1, max_seconds=0.0)
    with pytest.raises(BudgetExhausted) as info:
        run_search(shape, six_attr_data, cfg)
    validate(shape, info.value.arch)
    assert len(info.value.trace.records) == 1
    assert isinstance(info.value.store, WeightStore)


def test_config_invariants():
    for bad in ({"lr": 0}, {"momentum": 1.0}, {"valid_batches": 0},
                {"convergence_patience": 0}, {"dtype": "float16"}):
        with pytest.raises(ValueError):
            SearchConfig(**bad)


# -- finetune ---------------------------------------------------------------

def test_finetune_zero_iterations(small_data, shape124):
    store = WeightStore(shape124, seed=0)
    arch = random_architecture(shape124, 0)
    store.ensure(arch)
    before = store.checksum()
    finetune(shape124, arch, store, small_data.merged(["train", "valid"]), SearchConfig(), 0)
    assert store.checksum() == before


def test_finetune_touches_only_its_architecture(small_data, shape124):
    store = WeightStore(shape124, seed=0)
    a1 = make_architecture(shape124, [[0, 0], [0, 0, 0, 0]])
    a2 = make_architecture(shape124, [[0, 0], [1, 1, 1, 1]])
    store.ensure(a2)
    outside = [k for k in store.connections if k not in set(live_connections(shape124, a1))]
    before = store.checksum(outside, include_head=False)
    finetune(shape124, a1, store, small_data.merged(["train", "valid"]), SearchConfig(), 30)
    assert store.checksum(outside, include_head=False) == before


def test_finetune_smoothed_loss_decreases():
    shape = NetworkShape((1, 3, 6, 12), (16, 3, 3, 3), head_width=8)
    for seed in range(3):
        data = generate_synthetic(SyntheticSpec(rng_seed=seed))
        cfg = SearchConfig(rng_seed=seed)
        ctx = SearchContext.create(data, cfg)
        arch = random_architecture(shape, ctx.arch_seed)
        losses = []
        finetune(shape, arch, ctx.new_store(shape), data.merged(["train", "valid"]), cfg,
                 1500, losses=losses)
        windows = np.asarray(losses).reshape(-1, 50).mean(axis=1)
        steps = np.diff(windows)
        # strictly downhill while the loss is still falling, then flat up to minibatch noise
        assert np.all(steps[:9] <= 0)
        assert np.all(steps <= 0.01)
        assert windows[-1] < windows[0] - 0.1
