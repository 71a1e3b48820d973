import numpy as np
import pytest
import torch
from numpy.testing import assert_allclose

from efigp.ode_models import (
    IntegrationDivergedError,
    OdeSystem,
    RhsDomainError,
    TimeGrid,
    Trajectory,
    eval_rhs,
    fn_system,
    get_system,
    hes1_system,
    integrate_rk4,
    lv_system,
)

# Independent oracle rhs, written from the raw equations (not the library's
# log-space transforms), used to cross-check the shipped systems.


def raw_fn(x, th):
    a, b, c = th
    return np.array([c * (x[0] - x[0] ** 3 / 3 + x[1]), -(x[0] - a + b * x[1]) / c])


def raw_lv(x, th):
    a, b, c, d = th
    return np.array([a * x[0] - b * x[0] * x[1], c * x[0] * x[1] - d * x[1]])


def raw_hes1(x, th):
    a, b, c, d, e, f, g = th
    return np.array([
        -a * x[0] * x[2] + b * x[1] - c * x[0],
        -d * x[1] + e / (1 + x[0] ** 2),
        -a * x[0] * x[2] + f / (1 + x[0] ** 2) - g * x[2],
    ])


class TestEvalRhs:
    def test_fn_hand_value(self):
        out = eval_rhs(fn_system(), np.array([-1.0, 1.0]), np.array([0.2, 0.2, 3.0]))
        assert_allclose(out, [1.0, 1.0 / 3.0], rtol=1e-15)

    def test_lv_log_space_hand_value(self):
        out = eval_rhs(lv_system(), np.zeros(2), np.array([1.5, 1.0, 1.0, 3.0]))
        assert_allclose(out, [0.5, -2.0], rtol=1e-15)

    def test_lv_zero_params(self):
        rng = np.random.default_rng(0)
        u = rng.standard_normal(2)
        out = eval_rhs(lv_system(), u, np.zeros(4))
        assert_allclose(out, [0.0, 0.0])

    def test_hes1_log_space_hand_value(self):
        x = np.array([1.438575, 2.037488, 17.90385])
        th = np.array([0.022, 0.3, 0.031, 0.028, 0.5, 20.0, 0.3])
        out = eval_rhs(hes1_system(), np.log(x), th)
        # oracle: transformed rhs is f_raw(x)/x evaluated independently
        # (component 1 is a near-cancellation ~1.2e-5, hence the atol)
        assert_allclose(out, raw_hes1(x, th) / x, rtol=1e-9, atol=1e-12)
        assert_allclose(out, [0.0000, 0.0520, 0.0323], atol=1e-4)

    @pytest.mark.parametrize("name", ["fn", "lv", "hes1"])
    def test_log_space_rhs_matches_raw(self, name):
        sys = get_system(name)
        raw = {"fn": raw_fn, "lv": raw_lv, "hes1": raw_hes1}[name]
        rng = np.random.default_rng(3)
        th = sys.param_box[:, 0] + rng.uniform(0.1, 0.9, sys.param_count) * (
            sys.param_box[:, 1] - sys.param_box[:, 0])
        if sys.log_space:
            x = rng.uniform(0.5, 3.0, sys.dim)
            assert_allclose(eval_rhs(sys, np.log(x), th), raw(x, th) / x, rtol=1e-12)
        else:
            x = rng.standard_normal(sys.dim)
            assert_allclose(eval_rhs(sys, x, th), raw(x, th), rtol=1e-12)

    def test_domain_error_identifies_component(self):
        with pytest.raises(RhsDomainError) as err:
            eval_rhs(fn_system(), np.array([1e200, 0.0]), np.array([0.2, 0.2, 3.0]))
        assert err.value.component == 0

    def test_torch_backend_matches_numpy(self):
        for sys in (fn_system(), lv_system(), hes1_system()):
            rng = np.random.default_rng(7)
            x = rng.standard_normal((sys.dim, 5)) * 0.5
            th = sys.param_box.mean(axis=1)
            f_np = sys.rhs(x, th, 0.0, np)
            f_t = sys.rhs(torch.as_tensor(x), torch.as_tensor(th), 0.0, torch)
            assert_allclose(f_t.numpy(), f_np, rtol=1e-15)
            j_np = sys.jac_state(x, th, 0.0, np)
            j_t = sys.jac_state(torch.as_tensor(x), torch.as_tensor(th), 0.0, torch)
            assert_allclose(j_t.numpy(), j_np, rtol=1e-15)


class TestJacobians:
    """Hand-derived Jacobians against central finite differences."""

    @pytest.mark.parametrize("name", ["fn", "lv", "hes1"])
    def test_jac_state(self, name):
        sys = get_system(name)
        rng = np.random.default_rng(11)
        for _ in range(10):
            x = rng.standard_normal(sys.dim) * 0.8
            th = sys.param_box[:, 0] + rng.uniform(0.05, 0.95, sys.param_count) * (
                sys.param_box[:, 1] - sys.param_box[:, 0])
            jac = sys.jac_state(x, th, 0.0, np)
            h = 1e-6
            for e in range(sys.dim):
                dx = np.zeros(sys.dim)
                dx[e] = h
                fd = (sys.rhs(x + dx, th, 0.0, np) - sys.rhs(x - dx, th, 0.0, np)) / (2 * h)
                assert_allclose(jac[:, e], fd, rtol=1e-6, atol=1e-9)

    @pytest.mark.parametrize("name", ["fn", "lv", "hes1"])
    def test_jac_params(self, name):
        sys = get_system(name)
        rng = np.random.default_rng(13)
        for _ in range(10):
            x = rng.standard_normal(sys.dim) * 0.8
            th = sys.param_box[:, 0] + rng.uniform(0.05, 0.95, sys.param_count) * (
                sys.param_box[:, 1] - sys.param_box[:, 0])
            jac = sys.jac_params(x, th, 0.0, np)
            h = 1e-6
            for p in range(sys.param_count):
                dth = np.zeros(sys.param_count)
                dth[p] = h
                fd = (sys.rhs(x, th + dth, 0.0, np) - sys.rhs(x, th - dth, 0.0, np)) / (2 * h)
                assert_allclose(jac[:, p], fd, rtol=1e-6, atol=1e-9)


class TestTimeGrid:
    def test_rejects_unsorted(self):
        with pytest.raises(ValueError):
            TimeGrid(np.array([0.0, 2.0, 1.0]))

    def test_rejects_uneven(self):
        with pytest.raises(ValueError):
            TimeGrid(np.array([0.0, 1.0, 2.5]))

    def test_regular_nesting_is_bitwise(self):
        coarse = TimeGrid.regular(0.0, 20.0, 41)
        for n in (81, 161, 321, 641, 1281):
            fine = TimeGrid.regular(0.0, 20.0, n)
            stride = (n - 1) // 40
            assert np.array_equal(fine.points[::stride], coarse.points)


class TestIntegrateRk4:
    def test_zero_field_constant(self):
        zero_sys = OdeSystem(
            name="zero", dim=2, param_count=1, param_box=np.array([[0.0, 1.0]]),
            rhs=lambda x, th, t, xp: xp.zeros_like(x),
            jac_state=lambda x, th, t, xp: None,
            jac_params=lambda x, th, t, xp: None,
        )
        grid = TimeGrid.regular(0.0, 5.0, 11)
        traj = integrate_rk4(zero_sys, np.array([2.0, -3.0]), np.array([0.5]), grid)
        assert np.array_equal(traj.values, np.tile([[2.0], [-3.0]], (1, 11)))

    def test_constant_derivative_exact(self):
        # log-LV with b=c=0 has du/dt = (a, -d), integrated exactly by RK4
        grid = TimeGrid.regular(0.0, 1.0, 11)
        traj = integrate_rk4(lv_system(), np.zeros(2), np.array([1.5, 0.0, 0.0, 3.0]), grid)
        assert_allclose(traj.values[:, -1], [1.5, -3.0], rtol=1e-14)

    def test_fn_step_halving(self):
        th = np.array([0.2, 0.2, 3.0])
        x0 = np.array([-1.0, 1.0])
        coarse = integrate_rk4(fn_system(), x0, th, TimeGrid.regular(0.0, 20.0, 2561))
        fine = integrate_rk4(fn_system(), x0, th, TimeGrid.regular(0.0, 20.0, 5121))
        diff = np.max(np.abs(fine.values[:, ::2] - coarse.values))
        assert diff < 1e-5

    def test_order_four_on_exponential_decay(self):
        # du/dt = -u (raw LV component 2 with a=b=c=0, d=1); exact u(1)=e^{-1}
        decay = OdeSystem(
            name="decay", dim=1, param_count=1, param_box=np.array([[0.0, 2.0]]),
            rhs=lambda x, th, t, xp: -x,
            jac_state=lambda x, th, t, xp: None,
            jac_params=lambda x, th, t, xp: None,
        )
        errs = []
        for n in (11, 21):
            traj = integrate_rk4(decay, np.array([1.0]), np.array([1.0]),
                                 TimeGrid.regular(0.0, 1.0, n))
            errs.append(abs(traj.values[0, -1] - np.exp(-1.0)))
        ratio = errs[0] / errs[1]
        assert 12.0 < ratio < 20.0

    def test_log_space_consistency_lv(self):
        th = np.array([1.5, 1.0, 1.0, 3.0])
        x0 = np.array([5.0, 0.2])
        grid = TimeGrid.regular(0.0, 2.0, 2001)
        log_traj = integrate_rk4(lv_system(), np.log(x0), th, grid)

        raw_sys = OdeSystem(
            name="lv_raw", dim=2, param_count=4, param_box=np.array([[0.0, 10.0]] * 4),
            rhs=lambda x, t_, t, xp: xp.stack(
                [t_[0] * x[0] - t_[1] * x[0] * x[1], t_[2] * x[0] * x[1] - t_[3] * x[1]]),
            jac_state=lambda x, th, t, xp: None,
            jac_params=lambda x, th, t, xp: None,
        )
        raw_traj = integrate_rk4(raw_sys, x0, th, grid)
        rel = np.abs(np.exp(log_traj.values) - raw_traj.values) / np.abs(raw_traj.values)
        assert np.max(rel) < 1e-6

    def test_rhs_matches_finite_difference_slope(self):
        th = np.array([0.2, 0.2, 3.0])
        grid = TimeGrid.regular(0.0, 20.0, 2561)
        traj = integrate_rk4(fn_system(), np.array([-1.0, 1.0]), th, grid)
        h = grid.spacing
        slopes = (traj.values[:, 2:] - traj.values[:, :-2]) / (2 * h)
        f = fn_system().rhs(traj.values[:, 1:-1], th, 0.0, np)
        # central-difference truncation is h^2/6 * x'''; measured constant ~30
        assert np.max(np.abs(slopes - f)) < 50 * h ** 2

    def test_divergence_raises_with_time(self):
        blow = OdeSystem(
            name="blow", dim=1, param_count=1, param_box=np.array([[0.0, 1.0]]),
            rhs=lambda x, th, t, xp: x ** 3,
            jac_state=lambda x, th, t, xp: None,
            jac_params=lambda x, th, t, xp: None,
        )
        with pytest.raises(IntegrationDivergedError) as err:
            integrate_rk4(blow, np.array([5.0]), np.array([0.5]),
                          TimeGrid.regular(0.0, 10.0, 101))
        assert 0.0 < err.value.time <= 10.0


class TestTrajectoryCsv:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        grid = TimeGrid.regular(0.0, 1.0, 17)
        traj = Trajectory(grid, rng.standard_normal((3, 17)))
        path = tmp_path / "traj.csv"
        traj.to_csv(path)
        header = path.read_text().splitlines()[0]
        assert header == "t,x1,x2,x3"
        back = Trajectory.from_csv(path)
        assert np.array_equal(back.values, traj.values)
        assert np.array_equal(back.grid.points, traj.grid.points)
