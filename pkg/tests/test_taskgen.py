import dataclasses

import numpy as np
import pytest

from flexlora.errors import DatasetTooSmall, InvalidConfig, PoolExhausted
from flexlora.lowrank import numerical_rank
from flexlora.simmodel import _activations
from flexlora.taskgen import (
    WorldConfig,
    gen_client_dataset,
    gen_world,
    load_world,
    save_world,
    split_indices,
    split_sizes,
    unseen_pool,
)

SMALL = WorldConfig(num_clients=40, samples_per_client=(20, 60))


def test_defaults_echo_reference_setup():
    cfg = WorldConfig()
    assert cfg.num_task_archetypes == 8
    assert cfg.dirichlet_alpha == 0.5
    assert cfg.layer_dims == (32, 32, 16)


def test_single_archetype_is_iid():
    world = gen_world(dataclasses.replace(SMALL, num_task_archetypes=1))
    assert all(world.archetype(c) == 0 for c in range(world.num_clients))


def test_zero_specific_rank_gives_identical_teachers():
    world = gen_world(dataclasses.replace(SMALL, teacher_rank=0))
    ref = world.teacher_deltas(0)
    for t in range(1, 8):
        for a, b in zip(ref, world.teacher_deltas(t)):
            assert np.array_equal(a, b)


def test_teacher_ranks_match_configuration():
    cfg = dataclasses.replace(SMALL, shared_rank=3, teacher_rank=(1, 2, 3, 1, 2, 3, 1, 2))
    world = gen_world(cfg)
    for t, r in enumerate(cfg.specific_ranks()):
        for li in range(2):
            assert numerical_rank(world.specific[t][li]) == r
            assert numerical_rank(world.teacher_deltas(t)[li]) == 3 + r
    assert all(numerical_rank(s) == 3 for s in world.shared)


def test_meta_mode_covers_every_archetype():
    world = gen_world(SMALL)
    assert set(world.archetype(c) for c in range(world.num_clients)) == set(range(8))
    assert np.all(world.proportions.sum(axis=1) == 1.0)


def test_mixture_mode_proportions():
    world = gen_world(dataclasses.replace(SMALL, mode="mixture"))
    np.testing.assert_allclose(world.proportions.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(world.proportions >= 0)
    ds = gen_client_dataset(world, 0)
    assert ds.sample_count == world.sample_counts[0]


@pytest.mark.parametrize("bad", [
    {"num_clients": 0}, {"num_task_archetypes": 50}, {"noise_sigma": -0.1}, {"mode": "other"},
    {"dirichlet_alpha": 0.0}, {"samples_per_client": (5, 20)}, {"samples_per_client": (30, 20)},
    {"shared_rank": 15, "teacher_rank": 2}, {"teacher_rank": (1, 2)}, {"layer_dims": (8,)},
])
def test_invalid_configs(bad):
    with pytest.raises(InvalidConfig):
        gen_world(dataclasses.replace(SMALL, **bad))


def test_noiseless_targets_equal_teacher():
    world = gen_world(dataclasses.replace(SMALL, noise_sigma=0.0))
    ds = gen_client_dataset(world, 1, 30)
    t = ds.archetype
    for part in (ds.train, ds.val, ds.test):
        np.testing.assert_array_equal(part.targets, world.teacher_forward(t, part.inputs))


def test_teacher_forward_matches_layers():
    world = gen_world(SMALL)
    x = np.random.default_rng(0).standard_normal((3, 32))
    h = np.tanh(x @ world.teacher_weights(2)[0].T)
    np.testing.assert_allclose(world.teacher_forward(2, x), h @ world.teacher_weights(2)[1].T, atol=1e-13)
    assert np.allclose(_activations(world.teacher_weights(2), x)[-1], world.teacher_forward(2, x))


def test_split_sizes_8_1_1():
    world = gen_world(SMALL)
    ds = gen_client_dataset(world, 0, 100)
    assert (len(ds.train), len(ds.val), len(ds.test)) == (80, 10, 10)
    assert split_sizes(57) == (47, 5, 5)
    assert split_sizes(10) == (8, 1, 1)


def test_split_indices_disjoint_and_exhaustive():
    for n in (10, 13, 99, 250):
        parts = split_indices(n, np.random.default_rng(n))
        sets = [set(p.tolist()) for p in parts]
        assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])
        assert set().union(*sets) == set(range(n))


def test_dataset_too_small():
    with pytest.raises(DatasetTooSmall):
        gen_client_dataset(gen_world(SMALL), 0, 9)
    with pytest.raises(InvalidConfig):
        gen_client_dataset(gen_world(SMALL), 40)


def test_noise_concentration():
    sigma = 0.3
    world = gen_world(dataclasses.replace(SMALL, noise_sigma=sigma))
    ds = gen_client_dataset(world, 2, 4000)
    batch = ds.test
    resid = world.teacher_forward(ds.archetype, batch.inputs) - batch.targets
    per_sample = np.sum(resid ** 2, axis=1)
    d = world.config.layer_dims[-1]
    # sum of d squared N(0, sigma^2) is sigma^2 * chi2_d: mean sigma^2 d, variance 2 sigma^4 d
    se = np.sqrt(2 * sigma ** 4 * d / len(batch))
    assert abs(per_sample.mean() - sigma ** 2 * d) <= 3 * se
    assert world.noise_floor() == pytest.approx(0.5 * sigma ** 2 * d)


def test_reproducibility():
    a, b = gen_world(SMALL), gen_world(SMALL)
    for x, y in zip(a.bases + a.shared, b.bases + b.shared):
        assert np.array_equal(x, y)
    da, db = gen_client_dataset(a, 7), gen_client_dataset(b, 7)
    assert np.array_equal(da.test.inputs, db.test.inputs) and np.array_equal(da.test.targets, db.test.targets)
    other = gen_world(dataclasses.replace(SMALL, seed=1))
    assert not np.array_equal(a.bases[0], other.bases[0])


def test_heterogeneity_dial():
    def spread(scale):
        world = gen_world(dataclasses.replace(SMALL, specific_scale=scale))
        flat = [np.concatenate([d.ravel() for d in world.teacher_deltas(t)]) for t in range(8)]
        return np.mean([np.linalg.norm(flat[i] - flat[j]) for i in range(8) for j in range(i + 1, 8)])

    values = [spread(s) for s in (0.0, 0.2, 0.5, 1.0)]
    assert values[0] == 0.0
    assert all(b > a for a, b in zip(values, values[1:]))


def test_unseen_pool():
    world = gen_world(SMALL)
    assert unseen_pool(world, 0, 1) == []
    with pytest.raises(PoolExhausted):
        unseen_pool(world, 1, 1, trained=range(40))
    trained = set(range(0, 40, 3))
    pool = unseen_pool(world, 20, 5, trained)
    assert len(pool) == len(set(pool)) == 20
    assert not set(pool) & trained
    assert pool == unseen_pool(world, 20, 5, trained)
    with pytest.raises(InvalidConfig):
        unseen_pool(world, -1, 0)


def test_snapshot_roundtrip(tmp_path):
    world = gen_world(dataclasses.replace(SMALL, mode="mixture", teacher_rank=(1, 2, 1, 2, 1, 2, 1, 2)))
    path = tmp_path / "world.npz"
    save_world(world, path)
    back = load_world(path)
    assert back.config == world.config
    for x, y in zip(world.bases + world.shared, back.bases + back.shared):
        assert np.array_equal(x, y)
    assert np.array_equal(world.proportions, back.proportions)
    assert np.array_equal(gen_client_dataset(world, 3).train.targets, gen_client_dataset(back, 3).train.targets)
