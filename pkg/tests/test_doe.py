import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import qmc

import abmcal.doe as doe
from abmcal.doe import (DEFAULT_PRIOR_BOX, DesignError, PriorBox, generate_design, halton,
                        halton_point, load_design, load_prior_box, radical_inverse, run_design)
from abmcal.sim import SimParams, run_simulation


def van_der_corput(i, b):
    digits = []
    while i:
        i, d = divmod(i, b)
        digits.append(d)
    return sum(d * b ** -(k + 1) for k, d in enumerate(digits))


def test_first_point_hand_computed():
    np.testing.assert_allclose(halton_point(1, (2, 3)), [0.5, 1 / 3])
    assert radical_inverse(4, 2) == 0.125


def test_index_zero_rejected():
    with pytest.raises(ValueError):
        halton_point(0, (2, 3))
    with pytest.raises(ValueError):
        halton(3, (2, 3), start=0)
    with pytest.raises(ValueError):
        halton_point(1, (2, 2))


@given(st.integers(1, 10**9), st.sampled_from([2, 3, 5, 7, 11]))
def test_radical_inverse_matches_digit_oracle_and_lies_inside(i, b):
    x = radical_inverse(i, b)
    assert 0 < x < 1
    assert x == pytest.approx(van_der_corput(i, b), abs=1e-15)


def test_halton_matches_scipy_unscrambled():
    ref = qmc.Halton(d=4, scramble=False).random(65)[1:]
    np.testing.assert_allclose(halton(64, (2, 3, 5, 7)), ref, atol=1e-15)


def test_unit_box_design_is_halton():
    np.testing.assert_array_equal(generate_design(1, PriorBox.unit(4))[0],
                                  halton_point(1, (2, 3, 5, 7)))


def test_prior_box_bounds():
    D = generate_design(700)
    assert np.all(DEFAULT_PRIOR_BOX.contains(D))
    assert np.all((D[:, 0] > 0.046) & (D[:, 0] < 0.069))


def test_affine_map_first_coordinate():
    box = PriorBox((0, 0, 0, 0), (2, 1, 1, 1))
    D = generate_design(100, box)
    np.testing.assert_allclose(D[:, 0], 2 * radical_inverse(np.arange(1, 101), 2))


def test_discrepancy_below_iid():
    n = 256
    h = halton(n, (2, 3, 5, 7))
    iid = [qmc.discrepancy(np.random.default_rng(s).random((n, 4))) for s in range(20)]
    assert qmc.discrepancy(h) < np.median(iid)


@given(st.lists(st.floats(0, 1), min_size=4, max_size=4))
def test_scale_round_trip(u):
    u = np.array(u)
    np.testing.assert_allclose(DEFAULT_PRIOR_BOX.unscale(DEFAULT_PRIOR_BOX.scale(u)), u,
                               atol=1e-12)


def test_prior_box_validation(tmp_path):
    with pytest.raises(ValueError):
        PriorBox((0, 1, 0, 0), (1, 0, 1, 1))
    path = tmp_path / "box.yaml"
    path.write_text("prior_box:\n  a: [0, 1]\n  b: [0, 2]\n  c: [0, 3]\n  d: [0, 4]\n")
    box = load_prior_box(path)
    assert box.hi.tolist() == [1, 2, 3, 4] and box.names == ("a", "b", "c", "d")
    assert PriorBox.from_dict(DEFAULT_PRIOR_BOX.to_dict()) == DEFAULT_PRIOR_BOX


def test_two_points_one_seed_equal_direct_runs(small_config):
    D = generate_design(2)
    dm = run_design(D, 1, small_config)
    for i in range(2):
        t = run_simulation(SimParams.from_array(D[i]), 1, small_config)
        np.testing.assert_array_equal(dm.hosp[i], t.hosp_census)
        np.testing.assert_array_equal(dm.deaths[i], t.cum_deaths)


def test_design_files_reproducible_and_manifest(tmp_path, small_config):
    D = generate_design(4)
    a = run_design(D, 2, small_config, tmp_path / "a")
    run_design(D, 2, small_config, tmp_path / "b")
    for name in ["manifest.csv", "mean_p0.csv", "mean_p3.csv", "runs/traj_p2_s2.csv"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    header = (tmp_path / "a" / "manifest.csv").read_text().splitlines()[0]
    assert header == "row_id,theta1,theta2,theta3,theta4,seed_count,status"
    assert (tmp_path / "a" / "mean_p0.csv").read_text().startswith("day,mean_hosp,mean_cum_deaths")
    b = load_design(tmp_path / "a")
    np.testing.assert_array_equal(a.outputs(), b.outputs())
    np.testing.assert_allclose(b.thetas, D)


def test_resume_after_failure_matches_uninterrupted(tmp_path, small_config, monkeypatch):
    D = generate_design(6)
    full = run_design(D, 2, small_config, tmp_path / "full")

    real = doe._sim_or_raise

    def flaky(i, theta, seed, config):
        if i == 4:
            raise DesignError("simulated crash")
        return real(i, theta, seed, config)

    monkeypatch.setattr(doe, "_sim_or_raise", flaky)
    with pytest.raises(DesignError):
        run_design(D, 2, small_config, tmp_path / "part")
    early = (tmp_path / "part" / "mean_p1.csv").read_bytes()
    with pytest.raises(DesignError):
        load_design(tmp_path / "part")

    monkeypatch.setattr(doe, "_sim_or_raise", real)
    resumed = run_design(D, 2, small_config, tmp_path / "part", resume=True)
    assert (tmp_path / "part" / "mean_p1.csv").read_bytes() == early
    for i in range(6):
        name = f"mean_p{i}.csv"
        assert (tmp_path / "part" / name).read_bytes() == (tmp_path / "full" / name).read_bytes()
    np.testing.assert_array_equal(resumed.outputs(), full.outputs())


def test_failure_reports_theta(small_config):
    with pytest.raises(DesignError, match="theta"):
        run_design(np.array([[2.0, 1, 0.5, 0.5]]), 1, small_config)


def test_seed_count_validated():
    with pytest.raises(ValueError):
        run_design(generate_design(1), 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 40))
def test_design_rows_in_halton_order(n):
    D = generate_design(n)
    np.testing.assert_allclose(DEFAULT_PRIOR_BOX.unscale(D), halton(n, (2, 3, 5, 7)), atol=1e-12)
