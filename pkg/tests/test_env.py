import dataclasses
import math

import numpy as np
import pytest
from scipy import stats

from georep import env, geom
from georep.config import EmissionSpec, WorldConfig
from georep.env import WorldState
from georep.geom import Body


def world(**kw):
    return WorldConfig(**kw)


# --- step --------------------------------------------------------------------------


def test_far_object_is_bitwise_unchanged():
    cfg = world()
    s_ext = np.array([0.8, 0.8])
    state = WorldState(np.array([0.2, 0.2]), s_ext)
    nxt, hit = env.step(cfg, state, np.array([0.1, 0.0]), np.random.default_rng(0))
    assert not hit
    assert nxt.s_ext is s_ext or np.array_equal(nxt.s_ext, s_ext)
    assert nxt.s_ext.tobytes() == s_ext.tobytes()
    np.testing.assert_array_equal(nxt.s_int, state.s_int + np.array([0.1, 0.0]))


def test_invalid_action_is_rejected():
    cfg = world()
    state = WorldState(np.array([0.95, 0.5]), np.array([0.3, 0.3]))
    with pytest.raises(env.InvalidActionError):
        env.step(cfg, state, np.array([0.1, 0.0]), np.random.default_rng(0))
    with pytest.raises(env.InvalidActionError):
        # the boundary itself is outside the open cube
        env.step(cfg, state, np.array([0.05, 0.0]), np.random.default_rng(0))


def test_teleport_targets_are_uniform():
    cfg = world(body=Body("disc", 0.06))
    rng = np.random.default_rng(1)
    m = env.object_margin(cfg)
    pts = []
    while len(pts) < 10_000:
        s_ext = rng.uniform(m, 1 - m, 2)
        start = s_ext - np.array([0.05, 0.0])
        state = WorldState(start, s_ext)
        nxt, hit = env.step(cfg, state, np.array([0.08, 0.0]), rng)
        assert hit
        pts.append(nxt.s_ext)
    pts = np.array(pts)
    assert np.all((pts >= m) & (pts <= 1 - m))
    counts, _, _ = np.histogram2d(pts[:, 0], pts[:, 1], bins=10, range=[[m, 1 - m], [m, 1 - m]])
    _, p = stats.chisquare(counts.ravel())
    assert p > 0.01


def test_push_head_on_moves_object_along_action():
    cfg = world(dynamics="push_roll", body=Body("disc", 0.05))
    state = WorldState(np.array([0.2, 0.5]), np.array([0.5, 0.5]))
    a = np.array([0.4, 0.0])
    nxt, hit = env.step(cfg, state, a, np.random.default_rng(0))
    assert hit
    shift = nxt.s_ext - state.s_ext
    cross = shift[0] * a[1] - shift[1] * a[0]
    assert abs(cross) < 1e-12
    assert shift @ a > 0
    # overshoot equals the part of the action left after first contact
    assert shift[0] == pytest.approx(0.4 - 0.25)


def test_push_clamps_to_admissible_region():
    cfg = world(dynamics="push_roll", body=Body("disc", 0.05))
    state = WorldState(np.array([0.6, 0.5]), np.array([0.85, 0.5]))
    nxt, hit = env.step(cfg, state, np.array([0.35, 0.0]), np.random.default_rng(0))
    assert hit
    assert nxt.s_ext[0] == pytest.approx(1 - env.object_margin(cfg))


def test_box_rotates_on_teleport_and_off_center_push():
    cfg = world(body=Body("box", half_extents=(0.15, 0.04)))
    rng = np.random.default_rng(3)
    state = WorldState(np.array([0.2, 0.5]), np.array([0.5, 0.5]), geom.rotation_2d(0.0))
    nxt, hit = env.step(cfg, state, np.array([0.4, 0.0]), rng)
    assert hit and nxt.rotation is not None
    assert not np.allclose(nxt.rotation, state.rotation)
    push = dataclasses.replace(cfg, dynamics="push_roll")
    state = WorldState(np.array([0.55, 0.3]), np.array([0.5, 0.5]), geom.rotation_2d(0.0))
    nxt, hit = env.step(push, state, np.array([0.0, 0.4]), rng)
    assert hit
    assert nxt.angle() != pytest.approx(0.0)


# --- actions -----------------------------------------------------------------------


def test_action_at_center_always_accepted():
    state = WorldState(np.array([0.5, 0.5]), np.array([0.1, 0.1]))
    rng = np.random.default_rng(0)
    for _ in range(500):
        a = env.sample_action(state, rng, 0.2)
        assert np.all(np.abs(a) <= 0.2)


def test_actions_from_corner_stay_inside():
    state = WorldState(np.array([1e-3, 1 - 1e-3]), np.array([0.5, 0.5]))
    rng = np.random.default_rng(1)
    for _ in range(500):
        assert env.in_agent_space(state.s_int + env.sample_action(state, rng, 0.5))


def test_truncated_action_distribution_is_uniform():
    s = np.array([0.1, 0.3])
    state = WorldState(s, np.array([0.8, 0.8]))
    rng = np.random.default_rng(2)
    acts = np.array([env.sample_action(state, rng, 0.25) for _ in range(20_000)])
    lo = np.maximum(-0.25, -s)
    hi = np.minimum(0.25, 1 - s)
    counts, _, _ = np.histogram2d(acts[:, 0], acts[:, 1], bins=8, range=[[lo[0], hi[0]], [lo[1], hi[1]]])
    _, p = stats.chisquare(counts.ravel())
    assert p > 0.01
    assert np.all(acts >= lo) and np.all(acts <= hi)


# --- emissions ---------------------------------------------------------------------


def grid_states(k=32):
    xs = (np.arange(k) + 0.5) / k
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    s_int = np.stack([gx.ravel(), gy.ravel()], 1)
    s_ext = s_int[::-1] * 0.8 + 0.1
    return [WorldState(a, b) for a, b in zip(s_int, s_ext)]


def min_pairwise_distance(x):
    from scipy.spatial.distance import pdist

    return pdist(x).min()


def test_identity_emission_concatenates():
    cfg = world()
    s = WorldState(np.array([0.1, 0.2]), np.array([0.3, 0.4]))
    np.testing.assert_array_equal(env.emit(cfg, s), [0.1, 0.2, 0.3, 0.4])
    box = world(body=Body("box", half_extents=(0.1, 0.05)))
    rot = geom.rotation_2d(0.3)
    np.testing.assert_array_equal(env.emit(box, WorldState(s.s_int, s.s_ext, rot)),
                                  np.concatenate([s.s_int, s.s_ext, rot.ravel()]))


def test_scrambled_emission_is_injective_on_grid():
    cfg = world(emission=EmissionSpec("scrambled"))
    obs = env.emit_many(cfg, grid_states(32))
    assert obs.shape == (1024, 16)
    assert min_pairwise_distance(obs) > 0


def test_scrambled_emission_injective_on_dense_grid():
    cfg = world(emission=EmissionSpec("scrambled"))
    k = 64
    xs = (np.arange(k) + 0.5) / k
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    s_int = np.stack([gx.ravel(), gy.ravel()], 1)
    # pair each agent position with a distinct object position
    s_ext = np.roll(s_int, 517, axis=0)
    states = np.concatenate([s_int, s_ext], 1)
    obs = env.emit_scrambled(cfg.emission, states)
    assert len({row.tobytes() for row in obs}) == k * k


def test_scrambled_emission_is_deterministic():
    cfg = world(emission=EmissionSpec("scrambled", seed=4))
    s = grid_states(4)
    np.testing.assert_array_equal(env.emit_many(cfg, s), env.emit_many(cfg, s))
    other = world(emission=EmissionSpec("scrambled", seed=5))
    assert not np.allclose(env.emit_many(cfg, s), env.emit_many(other, s))


@pytest.mark.parametrize("background", [False, True])
def test_raster_distinguishes_small_moves(background):
    cfg = world(emission=EmissionSpec("raster", dynamic_background=background))
    a = WorldState(np.array([0.3, 0.4]), np.array([0.7, 0.6]))
    b = WorldState(np.array([0.4, 0.4]), np.array([0.7, 0.6]))
    c = WorldState(np.array([0.3, 0.4]), np.array([0.7, 0.61]))
    oa, ob, oc = env.emit(cfg, a), env.emit(cfg, b), env.emit(cfg, c)
    assert oa.shape == (32 * 32 * 3,)
    assert np.abs(oa - ob).max() > 0.1
    assert np.abs(oa - oc).max() > 0.01
    assert oa.min() >= 0 and oa.max() <= 1


def test_raster_injective_on_grid():
    cfg = world(emission=EmissionSpec("raster"))
    obs = env.emit_many(cfg, grid_states(16))
    assert min_pairwise_distance(obs) > 0


def test_background_moves_with_agent():
    cfg = world(emission=EmissionSpec("raster", dynamic_background=True))
    a = env.render(cfg, WorldState(np.array([0.3, 0.3]), np.array([0.7, 0.7])))
    b = env.render(cfg, WorldState(np.array([0.5, 0.3]), np.array([0.7, 0.7])))
    assert a[..., 2].sum() > 0
    # shifting the agent by 0.2 slides the backdrop by about 6.4 pixels
    assert not np.allclose(a[..., 2], b[..., 2])
    static = world(emission=EmissionSpec("raster"))
    assert env.render(static, WorldState(np.array([0.3, 0.3]), np.array([0.7, 0.7])))[..., 2].sum() == 0


def test_anisotropic_raster_encodes_orientation():
    cfg = world(body=Body("box", half_extents=(0.15, 0.04)), emission=EmissionSpec("raster_anisotropic"))
    s_int, s_ext = np.array([0.2, 0.2]), np.array([0.6, 0.6])
    a = env.emit(cfg, WorldState(s_int, s_ext, geom.rotation_2d(0.0)))
    b = env.emit(cfg, WorldState(s_int, s_ext, geom.rotation_2d(math.pi / 2)))
    assert np.abs(a - b).max() > 0.5


# --- datasets ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def dataset():
    cfg = world(body=Body("disc", 0.1), max_step=0.5)
    return env.generate_dataset(cfg, 3000, seed=11)


def test_dataset_shapes_and_default_size():
    cfg = world()
    ds = env.generate_dataset(cfg, 10_000, seed=0)
    assert len(ds) == 10_000
    assert ds.obs.shape == ds.next_obs.shape == (10_000, 4)
    assert ds.actions.shape == (10_000, 2)


def test_ground_truth_is_equivariant(dataset):
    t = dataset.truth
    assert np.max(np.abs(t.s_int_next - (t.s_int + t.actions))) <= 1e-12


def test_no_contact_transitions_leave_object_bitwise(dataset):
    t = dataset.truth
    quiet = ~t.interacted
    assert quiet.sum() > 0
    assert t.s_ext_next[quiet].tobytes() == t.s_ext[quiet].tobytes()
    assert np.all(np.any(t.s_ext_next[t.interacted] != t.s_ext[t.interacted], axis=1))


def test_labels_match_recomputed_contacts(dataset):
    labels = env.ground_truth_labels(dataset)
    np.testing.assert_array_equal(labels, env.recompute_contacts(dataset))
    assert labels.mean() == pytest.approx(dataset.interaction_fraction)


def test_objects_stay_reachable(dataset):
    t = dataset.truth
    m = env.object_margin(dataset.config)
    for s in (t.s_ext, t.s_ext_next):
        assert np.all((s >= m) & (s <= 1 - m))
    assert np.all((t.s_int > 0) & (t.s_int < 1))


def test_rollout_is_persistent(dataset):
    np.testing.assert_array_equal(dataset.obs[1:], dataset.next_obs[:-1])


def test_generation_is_deterministic():
    cfg = world(emission=EmissionSpec("scrambled"))
    a = env.generate_dataset(cfg, 500, seed=3, rollouts=3)
    b = env.generate_dataset(cfg, 500, seed=3, rollouts=3)
    assert a.obs.tobytes() == b.obs.tobytes()
    assert a.actions.tobytes() == b.actions.tobytes()
    c = env.generate_dataset(cfg, 500, seed=4, rollouts=3)
    assert a.obs.tobytes() != c.obs.tobytes()


def test_zero_contact_dataset_labels_all_false():
    cfg = world(body=Body("point"), contact_eps=1e-9, max_step=0.01)
    ds = env.generate_dataset(cfg, 200, seed=0)
    assert not env.ground_truth_labels(ds).any()


def test_missing_truth_is_an_error(dataset):
    with pytest.raises(env.MissingTruthError):
        env.ground_truth_labels(dataset.without_truth())


def test_save_and_load_roundtrip(tmp_path):
    cfg = world(body=Body("box", half_extents=(0.15, 0.04)), emission=EmissionSpec("scrambled"))
    ds = env.generate_dataset(cfg, 300, seed=5)
    env.save_dataset(ds, tmp_path)
    size = (tmp_path / "records.f32").stat().st_size
    assert size == 300 * (2 * ds.obs_dim + 2) * 4
    back = env.load_dataset(tmp_path)
    np.testing.assert_array_equal(back.obs, ds.obs)
    np.testing.assert_array_equal(back.next_obs, ds.next_obs)
    np.testing.assert_array_equal(back.actions, ds.actions.astype(np.float32))
    np.testing.assert_array_equal(back.truth.interacted, ds.truth.interacted)
    np.testing.assert_array_equal(back.truth.s_ext, ds.truth.s_ext)
    np.testing.assert_array_equal(back.truth.rotation, ds.truth.rotation)
    np.testing.assert_array_equal(back.truth.actions, ds.truth.actions)
    assert back.config == ds.config
    np.testing.assert_array_equal(env.recompute_contacts(back), back.truth.interacted)


def test_records_load_without_truth(tmp_path):
    ds = env.generate_dataset(world(), 50, seed=1)
    env.save_dataset(ds, tmp_path)
    (tmp_path / "truth.csv").unlink()
    back = env.load_dataset(tmp_path)
    assert back.truth is None
    assert len(env.load_records(tmp_path)) == 50
