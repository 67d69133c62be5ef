import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from georep import env, evaluate, learner
from georep.config import EvalConfig, WorldConfig
from georep.geom import Body, rotation_2d


@pytest.fixture(scope="module")
def world():
    return WorldConfig(max_step=0.4)


@pytest.fixture(scope="module")
def data(world):
    return env.generate_dataset(world, 600, seed=3)


H = np.array([0.3, -0.1])


def shifted(e, c):
    return learner.Encodings(e.z_int + c, e.ext_mean + c, e.ext_factor, e.w)


# --- relative-position error -----------------------------------------------------------


def test_cheat_encoder_has_zero_l_test(world, data):
    for h in (np.zeros(2), H, np.array([-5.0, 12.0])):
        assert evaluate.l_test(evaluate.cheat_encoders(world, h), data) <= 1e-12


def test_l_test_with_object_head_on_agent(data):
    t = data.truth
    expected = np.mean(np.sum((t.s_int - t.s_ext) ** 2, axis=1))
    assert evaluate.relative_error(t.s_int, t.s_int, t.s_int, t.s_ext) == pytest.approx(expected, rel=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=2))
def test_l_test_shift_invariance(c):
    rng = np.random.default_rng(0)
    z, ze, s, se = (rng.uniform(size=(50, 2)) for _ in range(4))
    c = np.array(c)
    base = evaluate.relative_error(z, ze, s, se)
    assert evaluate.relative_error(z + c, ze + c, s, se) == pytest.approx(base, abs=1e-12)


def test_l_test_needs_truth(world, data):
    with pytest.raises(env.MissingTruthError):
        evaluate.l_test(evaluate.cheat_encoders(world, H), data.without_truth())


# --- translation fit ---------------------------------------------------------------------


def test_fit_translation_exact(data):
    t = data.truth
    h, res = evaluate.fit_translation(t.s_int + H, t.s_ext + H, t.s_int, t.s_ext)
    np.testing.assert_allclose(h, H, atol=1e-14)
    assert np.max(res) < 1e-14


def test_fit_translation_scaled_map(data):
    t = data.truth
    h, res = evaluate.fit_translation(2 * t.s_int, 2 * t.s_ext, t.s_int, t.s_ext)
    # z - s = s, so h is the pooled mean position and residuals are |s - mean|_inf
    pooled = np.concatenate([t.s_int, t.s_ext])
    np.testing.assert_allclose(h, pooled.mean(axis=0), atol=1e-14)
    direct = np.maximum(np.abs(t.s_int - h).max(1), np.abs(t.s_ext - h).max(1))
    assert np.percentile(res, 95) == pytest.approx(np.percentile(direct, 95), abs=1e-14)
    assert np.percentile(res, 95) > 0.2


def test_fit_translation_minimizes_squared_residual():
    rng = np.random.default_rng(1)
    s, se = rng.uniform(size=(40, 2)), rng.uniform(size=(40, 2))
    z, ze = s + H + rng.normal(0, 0.05, s.shape), se + H + rng.normal(0, 0.05, s.shape)
    h, _ = evaluate.fit_translation(z, ze, s, se)

    def cost(c):
        return np.sum((z - s - c) ** 2) + np.sum((ze - se - c) ** 2)

    grid = np.linspace(-0.05, 0.05, 101)
    best = min(cost(h + np.array([dx, dy])) for dx in grid for dy in grid)
    assert cost(h) <= best + 1e-12


def test_fit_translation_zero_residual_iff_translation(data):
    t = data.truth
    z = t.s_int + H
    ze = t.s_ext + H
    ze[7, 0] += 1e-3
    _, res = evaluate.fit_translation(z, ze, t.s_int, t.s_ext)
    assert res.max() > 0
    with pytest.raises(ValueError):
        evaluate.fit_translation(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)))


# --- interaction accuracy ------------------------------------------------------------------


def test_otsu_accuracy_perfect_and_inverted():
    labels = np.array([True, False, False, True, False])
    perfect = learner.BatchClasses(0.0, labels.copy())
    assert evaluate.otsu_accuracy(perfect, labels) == 1.0
    rng = np.random.default_rng(2)
    guess = learner.BatchClasses(0.0, rng.uniform(size=5) < 0.5)
    flipped = learner.BatchClasses(0.0, ~guess.plus)
    assert evaluate.otsu_accuracy(flipped, labels) == pytest.approx(1 - evaluate.otsu_accuracy(guess, labels))


def test_otsu_accuracy_coin_flip():
    rng = np.random.default_rng(3)
    n = 10000
    labels = np.arange(n) % 2 == 0
    acc = evaluate.otsu_accuracy(learner.BatchClasses(0.0, rng.uniform(size=n) < 0.5), labels)
    lo, hi = stats.binom.interval(0.999, n, 0.5)
    assert lo / n <= acc <= hi / n


def test_otsu_accuracy_shape_check():
    with pytest.raises(ValueError):
        evaluate.otsu_accuracy(learner.BatchClasses(0.0, np.zeros(3, bool)), np.zeros(4, bool))


def test_cheat_code_separates_interactions(world, data):
    enc = evaluate.cheat_encoders(world, H)
    e, e2 = learner.encode(enc, data.obs), learner.encode(enc, data.next_obs)
    acc = evaluate.otsu_accuracy(evaluate.classify_dataset(e, e2), data.truth.interacted)
    assert acc == 1.0


# --- orientation --------------------------------------------------------------------------


def _factor_from_cov(cov):
    return np.linalg.cholesky(cov)


def test_orientation_of_constructed_covariance():
    rng = np.random.default_rng(4)
    thetas = rng.uniform(0, 2 * np.pi, 50)
    rots = np.stack([rotation_2d(t) for t in thetas])
    half = (0.2, 0.05)
    covs = np.stack([r @ np.diag([4.0, 1.0]) @ r.T for r in rots])
    fac = np.stack([_factor_from_cov(c) for c in covs])
    axes, usable = evaluate.covariance_long_axes(np.zeros((50, 2)), fac)
    assert usable.all()
    err = evaluate.axis_angle_deg(axes, evaluate.true_long_axes(rots, half))
    assert err.max() < 1e-6
    swapped = np.stack([_factor_from_cov(r @ np.diag([1.0, 4.0]) @ r.T) for r in rots])
    axes, _ = evaluate.covariance_long_axes(np.zeros((50, 2)), swapped)
    np.testing.assert_allclose(evaluate.axis_angle_deg(axes, evaluate.true_long_axes(rots, half)), 90.0, atol=1e-6)


def test_orientation_random_angle_differences():
    rng = np.random.default_rng(5)
    for _ in range(100):
        a, b = rng.uniform(-10, 10, 2)
        u = np.array([np.cos(a), np.sin(a)])
        v = np.array([np.cos(b), np.sin(b)])
        diff = np.degrees(abs(a - b)) % 180.0
        expected = min(diff, 180.0 - diff)
        assert evaluate.axis_angle_deg(u, v) == pytest.approx(expected, abs=1e-6)


def test_near_isotropic_samples_are_skipped():
    fac = np.stack([np.eye(2), np.diag([1.01, 1.0]), np.diag([2.0, 1.0])])
    _, usable = evaluate.covariance_long_axes(np.zeros((3, 2)), fac)
    assert usable.tolist() == [False, False, True]


def test_orientation_error_on_box_cheat():
    cfg = WorldConfig(body=Body("box", half_extents=(0.15, 0.04)), max_step=0.3)
    ds = env.generate_dataset(cfg, 100, seed=0)
    enc = evaluate.cheat_encoders(cfg, H, mode="stochastic")
    # the cheat covariance is isotropic, so every sample is skipped
    value, used = evaluate.orientation_error(enc, ds)
    assert used == 0 and np.isnan(value)
    with pytest.raises(ValueError):
        evaluate.orientation_error(evaluate.cheat_encoders(cfg, H), ds)


def test_orientation_error_needs_box(world, data):
    with pytest.raises(ValueError):
        evaluate.orientation_error(evaluate.cheat_encoders(world, H, mode="stochastic"), data)


# --- sufficient conditions ---------------------------------------------------------------


def test_cheat_encoder_has_no_violations(world, data):
    assert data.truth.interacted.any()
    counts = evaluate.check_theorem_conditions(evaluate.cheat_encoders(world, H), data)
    assert counts == {"equivariance": 0, "injectivity": 0, "contact": 0}


def test_cheat_encoder_tight_tolerances_on_clean_data():
    cfg = WorldConfig(body=Body("point"), contact_eps=1e-9, max_step=0.01)
    ds = env.generate_dataset(cfg, 300, seed=1)
    assert not ds.truth.interacted.any()
    tight = EvalConfig(tol_eq=1e-9, tol_cond3=1e-9, tol_inj=1e-9)
    assert evaluate.check_theorem_conditions(evaluate.cheat_encoders(cfg, H), ds, tight) == {
        "equivariance": 0, "injectivity": 0, "contact": 0,
    }


def _encodings(world, data):
    enc = evaluate.cheat_encoders(world, H)
    return learner.encode(enc, data.obs), learner.encode(enc, data.next_obs)


def _far_from_segment(e, data, margin):
    d = np.sqrt(np.sum((e.ext_mean - e.z_int) ** 2, axis=1))
    ok = (~data.truth.interacted) & (d > np.linalg.norm(data.actions, axis=1) + margin)
    return int(np.flatnonzero(ok)[0])


def test_perturbed_object_head_violates_contact_condition(world, data):
    e, e2 = _encodings(world, data)
    k = _far_from_segment(e, data, 0.5)
    e.ext_mean[k] += np.array([0.2, 0.0])
    counts = evaluate.condition_violations(e, e2, data.actions, data.obs, data.next_obs, EvalConfig())
    # |0.2|^2 = 0.04 > tol_cond3, and the segment is far away
    assert counts == {"equivariance": 0, "injectivity": 0, "contact": 1}


def test_perturbed_agent_head_violates_equivariance(world, data):
    e, e2 = _encodings(world, data)
    k = _far_from_segment(e, data, 0.5)
    e2.z_int[k] += np.array([0.0, 0.2])
    counts = evaluate.condition_violations(e, e2, data.actions, data.obs, data.next_obs, EvalConfig())
    assert counts == {"equivariance": 1, "injectivity": 0, "contact": 0}


def test_collapsed_codes_violate_injectivity(world, data):
    e, e2 = _encodings(world, data)
    i, j = 10, 200
    assert data.obs[i].tobytes() != data.obs[j].tobytes()
    for arr in (e.z_int, e.ext_mean, e.w):
        arr[j] = arr[i]
    # record j's next code is untouched, so only condition 3 at j can change
    e2.ext_mean[j] = e.ext_mean[j]
    counts = evaluate.condition_violations(e, e2, data.actions, data.obs, data.next_obs, EvalConfig())
    assert counts["injectivity"] >= 1
    # the colliding pairs: (i, j) plus any copies of observation i elsewhere in the rollout
    same_as_i = [k for k in range(len(data)) if data.next_obs[k].tobytes() == data.obs[i].tobytes()]
    assert counts["injectivity"] == 1 + len(same_as_i)


@settings(max_examples=10, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50))
def test_violation_counts_translation_invariant(cx, cy):
    world = WorldConfig(max_step=0.4)
    data = env.generate_dataset(world, 200, seed=3)
    enc = evaluate.cheat_encoders(world, H)
    e, e2 = learner.encode(enc, data.obs), learner.encode(enc, data.next_obs)
    rng = np.random.default_rng(0)
    for arr in (e.ext_mean, e2.z_int):
        arr += rng.normal(0, 0.1, arr.shape)
    c = np.array([cx, cy])
    base = evaluate.condition_violations(e, e2, data.actions, data.obs, data.next_obs, EvalConfig())
    moved = evaluate.condition_violations(shifted(e, c), shifted(e2, c), data.actions, data.obs, data.next_obs,
                                          EvalConfig())
    assert base == moved
    assert base["equivariance"] > 0 and base["contact"] > 0


# --- report ----------------------------------------------------------------------------------


def test_report_of_cheat_encoder(world, data):
    rep = evaluate.evaluate(evaluate.cheat_encoders(world, H), data, epoch=3)
    assert rep.l_test <= 1e-12
    np.testing.assert_allclose(rep.translation_h, H, atol=1e-6)
    assert rep.translation_residual_p95 < 1e-6
    assert rep.otsu_accuracy == 1.0
    assert rep.orientation_error_deg is None
    line = evaluate.report_csv_line(rep)
    assert line.count(",") == len(evaluate.REPORT_COLUMNS) - 1
    assert line.startswith("3,")
    assert "tol_cond3 = 0.01" in rep.to_text()


def test_report_without_truth_keeps_conditions(world, data, caplog):
    rep = evaluate.evaluate(evaluate.cheat_encoders(world, H), data.without_truth())
    assert rep.l_test is None and rep.otsu_accuracy is None
    assert rep.condition_violations["equivariance"] == 0
    assert "l_test = n/a" in rep.to_text()
    assert "ground truth" in caplog.text


def test_report_validation():
    with pytest.raises(ValueError):
        evaluate.EvalReport(float("nan"), None, None, None, None, {})
    with pytest.raises(ValueError):
        evaluate.EvalReport(0.0, None, None, 1.5, None, {})


def test_report_header_schema():
    assert evaluate.report_csv_header() == (
        "epoch,l_test,translation_h,translation_residual_p95,otsu_accuracy,orientation_error_deg,"
        "violations_equivariance,violations_injectivity,violations_contact\n"
    )


def test_latent_dump(world, data):
    header, rows = evaluate.latent_rows(evaluate.cheat_encoders(world, H), data)
    assert header == ["index", "z_int_0", "z_int_1", "z_ext_0", "z_ext_1", "cov_00", "cov_01", "cov_11",
                      "w_0", "w_1", "s_int_0", "s_int_1", "s_ext_0", "s_ext_1"]
    assert len(rows) == len(data)
    row = rows[5]
    assert float(row[1]) == pytest.approx(data.truth.s_int[5, 0] + H[0], abs=1e-6)
    assert float(row[5]) == pytest.approx(0.05**2, rel=1e-6)
