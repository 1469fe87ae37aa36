import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from seqnas.blocks import BlockKind
from seqnas.space import (Path, SpaceConfig, compose_space, enum_dim_paths, greedy_select, kmeans, kmeans_reduce,
                          load_space, log_distance, one_hot_types, save_space, space_stats, unpruned_size)

CNN, TR = BlockKind.CNN, BlockKind.TRANSFORMER


def cfg(**kw):
    base = dict(depths=(2,), widths=(64, 128), h0=64, targets={2: 1})
    return SpaceConfig(**(base | kw))


def brute_monotone(widths, h0, d):
    return sorted(t for t in itertools.product(widths, repeat=d)
                  if all(b >= a for a, b in zip((h0,) + t, t)))


@pytest.mark.parametrize("widths,d,count", [((64, 128), 2, 3), ((64,), 4, 1), ((64, 128, 256, 512), 3, 20)])
def test_enum_counts(widths, d, count):
    got = enum_dim_paths(cfg(widths=widths, depths=(d,), targets={d: 1}), d)
    assert len(got) == count
    assert sorted(got) == brute_monotone(widths, 64, d)


def test_widths_below_h0_are_excluded():
    c = SpaceConfig(depths=(2,), widths=(32, 64, 128), h0=64, targets={2: 1})
    assert enum_dim_paths(c, 2) == [(64, 64), (64, 128), (128, 128)]


def test_log_distance():
    assert log_distance((64, 128), (64, 128), 64) == 0.0
    assert log_distance((64, 128), (64, 256), 64) == pytest.approx(1.0)
    assert log_distance((64, 64), (128, 128), 64) == pytest.approx(math.sqrt(2))
    with pytest.raises(ValueError):
        log_distance((64,), (64, 64), 64)


def test_greedy_degenerate_thresholds():
    paths = enum_dim_paths(cfg(widths=(64, 128, 256)), 2)
    assert greedy_select(paths + paths, 1e-12, 64) == sorted(paths)
    assert greedy_select(paths, math.inf, 64) == [sorted(paths)[0]]


def test_greedy_kept_set_by_brute_force():
    paths = enum_dim_paths(cfg(widths=(64, 128, 256)), 2)
    kept = greedy_select(paths, 1.0, 64)
    for a, b in itertools.combinations(kept, 2):
        assert log_distance(a, b, 64) >= 1.0
    for p in set(paths) - set(kept):
        earlier = [q for q in kept if q < p]
        assert any(log_distance(p, q, 64) < 1.0 for q in earlier)


def test_kmeans_reduce_every_item_when_k_equals_n():
    x = np.random.default_rng(0).normal(size=(6, 2))
    assert kmeans_reduce(x, 6, seed=1) == list(range(6))


def test_kmeans_reduce_separated_groups():
    types = [(CNN, CNN, CNN), (CNN, CNN, TR), (TR, TR, TR), (TR, TR, CNN)]
    x = one_hot_types(types, (CNN, TR))
    picked = kmeans_reduce(x, 2, seed=0)
    assert {i // 2 for i in picked} == {0, 1}


def test_kmeans_reduce_deterministic():
    x = np.random.default_rng(1).normal(size=(40, 3))
    assert kmeans_reduce(x, 5, seed=3) == kmeans_reduce(x, 5, seed=3)


def test_kmeans_reduce_too_many_clusters():
    with pytest.raises(ValueError):
        kmeans_reduce(np.zeros((5, 2)), 2, seed=0)


def test_kmeans_recovers_blobs():
    rng = np.random.default_rng(0)
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    x = np.concatenate([c + rng.normal(scale=0.1, size=(30, 2)) for c in centers])
    got, labels = kmeans(x, 3, seed=0)
    assert len(set(labels[:30])) == len(set(labels[30:60])) == len(set(labels[60:])) == 1
    np.testing.assert_allclose(np.sort(got, axis=0), np.sort(centers, axis=0), atol=0.1)


def test_toy_space_matches_hand_oracle():
    c = SpaceConfig(depths=(2,), widths=(32, 64), h0=32, modules=(CNN, TR), targets={2: 4})
    got = [(p.path_id, p.dims, p.types) for p in compose_space(c)]
    assert got == [("d2-p0", (32, 32), (CNN, CNN)), ("d2-p1", (32, 64), (CNN, TR)),
                   ("d2-p2", (64, 64), (TR, CNN)), ("d2-p3", (32, 32), (TR, TR))]


def brute_force_space(c):
    """Every valid (dims, types) pair per depth, straight from the definitions."""
    return {d: {(h, m) for h in brute_monotone(c.widths, c.h0, d)
                for m in itertools.product(c.modules, repeat=d)} for d in c.depths}


@given(st.sampled_from([(32, 64), (32, 64, 128), (64, 128, 256)]), st.integers(1, 9), st.integers(1, 9),
       st.integers(0, 3))
def test_compose_space_against_brute_force(widths, k2, k3, seed):
    c = SpaceConfig(depths=(2, 3), widths=widths, h0=widths[0], modules=(CNN, TR, BlockKind.LSTM),
                    targets={2: k2, 3: k3}, seed=seed)
    valid = brute_force_space(c)
    paths = compose_space(c)
    for d, k in ((2, k2), (3, k3)):
        mine = [(p.dims, p.types) for p in paths if p.depth == d]
        assert len(mine) == k == len(set(mine))
        assert set(mine) <= valid[d]
    assert all(p.is_monotone(c.h0) for p in paths)


def test_target_beyond_space_rejected():
    with pytest.raises(ValueError):
        compose_space(SpaceConfig(depths=(1,), widths=(64,), modules=(CNN,), targets={1: 2}))


def test_paper_scale_space():
    c = SpaceConfig()
    paths = compose_space(c)
    assert len(paths) == 360
    assert space_stats(paths, 64)["by_depth"] == {3: 60, 4: 100, 5: 100, 6: 100}
    assert all(p.is_monotone(64) for p in paths)
    assert len({(p.dims, p.types) for p in paths}) == 360
    assert unpruned_size(c) == 20 * 5 ** 3 + 35 * 5 ** 4 + 56 * 5 ** 5 + 84 * 5 ** 6


def test_config_validation():
    with pytest.raises(ValueError):
        SpaceConfig(depths=(3,), targets={4: 10})
    with pytest.raises(ValueError):
        SpaceConfig(widths=(32, 64), h0=48)


def test_path_json_round_trip(tmp_path):
    paths = compose_space(cfg(targets={2: 3}))
    save_space(paths, tmp_path / "s.json")
    assert load_space(tmp_path / "s.json") == paths


def test_path_layers_chain_from_h0():
    p = Path("x", (CNN, TR), (128, 256))
    assert p.layers(64) == [(CNN, 64, 128), (TR, 128, 256)]
    assert not Path("y", (CNN, CNN), (128, 64)).is_monotone(64)
