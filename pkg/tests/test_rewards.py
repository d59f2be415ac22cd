"""Reward table content, gating behavior, and hand-computed term values."""

import numpy as np
import pytest

from hafo_lab.configio import ConfigError
from hafo_lab.rewards import RewardInputs, RewardTable, compute_rewards

# the published weight table the bundled config must reproduce exactly
EXPECTED_WEIGHTS = {
    "orientation": -4.0,
    "torso_orientation": -7.0,
    "lower_action_rate": -0.2,
    "feet_orientation": -4.0,
    "termination": -350.0,
    "feet_parallel": -2.0,
    "lower_stand_still_reg": -2.2,
    "base_height": -10.0,
    "additional_torques": -0.0001,
    "additional_dof_vel": -0.008,
    "additional_dof_acc": -0.000011,
    "additional_action_rate": -0.01,
    "horizontal_ang_vel": -1.0,
    "lin_vel_x": 2.0,
    "lin_vel_y": 2.0,
    "ang_vel_yaw": 6.0,
    "upper_dofs_position": 4.0,
    "lower_stand_still_task": 3.0,
}

EXPECTED_GATES = {
    "lower_stand_still_reg": "force_on",
    "additional_torques": "force_on",
    "additional_dof_vel": "force_on",
    "additional_dof_acc": "force_on",
    "additional_action_rate": "force_on",
    "lower_stand_still_task": "force_on",
    "base_height": "force_off",
    "horizontal_ang_vel": "force_off",
    "lin_vel_x": "force_off",
    "lin_vel_y": "force_off",
    "ang_vel_yaw": "force_off",
}


def make_inputs(n=1, **overrides) -> RewardInputs:
    base = dict(
        base_pitch=np.zeros(n),
        base_ang_vel=np.zeros(n),
        base_height=np.full(n, 0.7),
        base_lin_vel=np.zeros((n, 2)),
        commands=np.zeros((n, 3)),
        q_lower=np.zeros((n, 4)),
        q_lower_default=np.zeros(4),
        q_upper=np.zeros((n, 4)),
        upper_ref=np.zeros((n, 4)),
        q_dot_upper=np.zeros((n, 4)),
        q_acc_upper=np.zeros((n, 4)),
        torques_upper=np.zeros((n, 4)),
        action_lower=np.zeros((n, 4)),
        prev_action_lower=np.zeros((n, 4)),
        action_upper=np.zeros((n, 4)),
        prev_action_upper=np.zeros((n, 4)),
        feet_height_var=np.zeros(n),
        height_target=0.7,
        terminated=np.zeros(n, dtype=bool),
        force_active=np.zeros(n, dtype=bool),
    )
    base.update(overrides)
    return RewardInputs(**base)


class TestBundledTable:
    def test_weights_match_published_values(self):
        table = RewardTable.bundled()
        assert table.weights() == EXPECTED_WEIGHTS

    def test_kernel_scale(self):
        assert RewardTable.bundled().kernel_scale == 0.25

    def test_gate_assignments(self):
        table = RewardTable.bundled()
        gates = {t.name: t.gate for t in table.terms}
        for name, gate in EXPECTED_GATES.items():
            assert gates[name] == gate, name
        for name in set(EXPECTED_WEIGHTS) - set(EXPECTED_GATES):
            assert gates[name] == "always", name

    def test_upper_tracking_feeds_upper_stream(self):
        table = RewardTable.bundled()
        streams = {t.name: t.stream for t in table.terms}
        assert streams["upper_dofs_position"] == "upper"
        assert streams["termination"] == "both"
        assert streams["lin_vel_x"] == "lower"


class TestGating:
    def _busy_inputs(self, force):
        rng = np.random.default_rng(50)
        n = 3
        return make_inputs(
            n=n,
            base_pitch=rng.normal(0, 0.2, n),
            base_ang_vel=rng.normal(0, 1, n),
            base_height=rng.uniform(0.5, 0.8, n),
            base_lin_vel=rng.normal(0, 0.5, (n, 2)),
            commands=rng.normal(0, 0.5, (n, 3)),
            q_lower=rng.normal(0, 0.3, (n, 4)),
            q_upper=rng.normal(0, 0.3, (n, 4)),
            q_dot_upper=rng.normal(0, 2, (n, 4)),
            q_acc_upper=rng.normal(0, 20, (n, 4)),
            torques_upper=rng.normal(0, 10, (n, 4)),
            action_lower=rng.normal(0, 1, (n, 4)),
            action_upper=rng.normal(0, 1, (n, 4)),
            feet_height_var=rng.uniform(1e-4, 0.01, n),
            force_active=np.full(n, force),
        )

    def test_force_on_terms_silent_without_force(self):
        out = compute_rewards(RewardTable.bundled(), self._busy_inputs(False))
        for name, gate in EXPECTED_GATES.items():
            if gate == "force_on":
                assert np.all(out.weighted[name] == 0.0), name
            else:
                assert np.any(out.weighted[name] != 0.0), name

    def test_force_off_terms_silent_with_force(self):
        out = compute_rewards(RewardTable.bundled(), self._busy_inputs(True))
        for name, gate in EXPECTED_GATES.items():
            if gate == "force_off":
                assert np.all(out.weighted[name] == 0.0), name
            else:
                assert np.any(out.weighted[name] != 0.0), name

    def test_ungated_terms_identical_across_gate_states(self):
        on = compute_rewards(RewardTable.bundled(), self._busy_inputs(True))
        off = compute_rewards(RewardTable.bundled(), self._busy_inputs(False))
        for name in set(EXPECTED_WEIGHTS) - set(EXPECTED_GATES):
            np.testing.assert_array_equal(on.weighted[name], off.weighted[name])

    def test_mixed_batch_gates_rowwise(self):
        inputs = make_inputs(n=2, q_lower=np.full((2, 4), 0.3),
                             force_active=np.array([True, False]))
        out = compute_rewards(RewardTable.bundled(), inputs)
        assert out.weighted["lower_stand_still_reg"][0] == pytest.approx(-2.2 * 0.6)
        assert out.weighted["lower_stand_still_reg"][1] == 0.0


class TestTermValues:
    def test_neutral_standing_totals(self):
        # perfect stand, no force: the three command kernels saturate at 1
        out = compute_rewards(RewardTable.bundled(), make_inputs())
        assert out.lower_total[0] == pytest.approx(2.0 + 2.0 + 6.0)
        assert out.upper_total[0] == pytest.approx(4.0)

    def test_neutral_standing_totals_under_force(self):
        out = compute_rewards(RewardTable.bundled(),
                              make_inputs(force_active=np.array([True])))
        assert out.lower_total[0] == pytest.approx(3.0)
        assert out.upper_total[0] == pytest.approx(4.0)

    def test_termination_full_weight_single_step(self):
        inputs = make_inputs(n=2, terminated=np.array([True, False]))
        out = compute_rewards(RewardTable.bundled(), inputs)
        np.testing.assert_allclose(out.weighted["termination"], [-350.0, 0.0])
        assert out.lower_total[0] - out.lower_total[1] == pytest.approx(-350.0)
        assert out.upper_total[0] - out.upper_total[1] == pytest.approx(-350.0)

    def test_upper_tracking_kernel_value(self):
        ref = np.zeros((1, 4))
        q = np.array([[0.5, 0.0, 0.0, 0.0]])
        out = compute_rewards(RewardTable.bundled(),
                              make_inputs(q_upper=q, upper_ref=ref))
        assert out.weighted["upper_dofs_position"][0] == pytest.approx(
            4.0 * np.exp(-0.25 / 0.25)
        )

    def test_velocity_tracking_kernel(self):
        inputs = make_inputs(commands=np.array([[0.5, 0.0, 0.0]]),
                             base_lin_vel=np.array([[0.2, 0.0]]))
        out = compute_rewards(RewardTable.bundled(), inputs)
        assert out.weighted["lin_vel_x"][0] == pytest.approx(
            2.0 * np.exp(-(0.3**2) / 0.25)
        )

    def test_lateral_and_yaw_score_against_zero(self):
        # no lateral or yaw DOF exists; the kernels read only the command
        inputs = make_inputs(commands=np.array([[0.0, 0.4, -0.3]]),
                             base_lin_vel=np.array([[0.9, 0.5]]))
        out = compute_rewards(RewardTable.bundled(), inputs)
        assert out.weighted["lin_vel_y"][0] == pytest.approx(
            2.0 * np.exp(-(0.4**2) / 0.25))
        assert out.weighted["ang_vel_yaw"][0] == pytest.approx(
            6.0 * np.exp(-(0.3**2) / 0.25))

    def test_action_rate_penalties(self):
        inputs = make_inputs(
            action_lower=np.array([[0.1, -0.2, 0.0, 0.3]]),
            prev_action_lower=np.zeros((1, 4)),
            action_upper=np.array([[0.5, 0.0, 0.0, 0.0]]),
            prev_action_upper=np.array([[0.1, 0.0, 0.0, 0.0]]),
            force_active=np.array([True]),
        )
        out = compute_rewards(RewardTable.bundled(), inputs)
        assert out.weighted["lower_action_rate"][0] == pytest.approx(
            -0.2 * (0.01 + 0.04 + 0.09))
        assert out.weighted["additional_action_rate"][0] == pytest.approx(
            -0.01 * 0.16)

    def test_stand_still_reg_uses_unsquared_norm(self):
        inputs = make_inputs(q_lower=np.array([[0.3, -0.4, 0.0, 0.0]]),
                             force_active=np.array([True]))
        out = compute_rewards(RewardTable.bundled(), inputs)
        assert out.weighted["lower_stand_still_reg"][0] == pytest.approx(-2.2 * 0.5)

    def test_base_height_quadratic(self):
        inputs = make_inputs(base_height=np.array([0.65]))
        out = compute_rewards(RewardTable.bundled(), inputs)
        assert out.weighted["base_height"][0] == pytest.approx(-10.0 * 0.05**2)

    def test_orientation_pair_shares_the_pitch_signal(self):
        inputs = make_inputs(base_pitch=np.array([0.2]))
        out = compute_rewards(RewardTable.bundled(), inputs)
        v = np.sin(0.2) ** 2
        assert out.weighted["orientation"][0] == pytest.approx(-4.0 * v)
        assert out.weighted["torso_orientation"][0] == pytest.approx(-7.0 * v)

    def test_feet_orientation_is_neutral_on_point_feet(self):
        out = compute_rewards(RewardTable.bundled(),
                              make_inputs(feet_height_var=np.array([0.04])))
        assert np.all(out.weighted["feet_orientation"] == 0.0)
        assert out.weighted["feet_parallel"][0] == pytest.approx(-2.0 * 0.04)


class TestSignAudit:
    def test_regularization_nonpositive_task_nonnegative(self):
        table = RewardTable.bundled()
        task = {"lin_vel_x", "lin_vel_y", "ang_vel_yaw", "upper_dofs_position",
                "lower_stand_still_task"}
        rng = np.random.default_rng(77)
        for trial in range(50):
            n = 8
            inputs = make_inputs(
                n=n,
                base_pitch=rng.normal(0, 1, n),
                base_ang_vel=rng.normal(0, 3, n),
                base_height=rng.uniform(0.0, 1.2, n),
                base_lin_vel=rng.normal(0, 2, (n, 2)),
                commands=rng.normal(0, 1, (n, 3)),
                q_lower=rng.normal(0, 1, (n, 4)),
                q_upper=rng.normal(0, 1, (n, 4)),
                upper_ref=rng.normal(0, 1, (n, 4)),
                q_dot_upper=rng.normal(0, 10, (n, 4)),
                q_acc_upper=rng.normal(0, 100, (n, 4)),
                torques_upper=rng.normal(0, 30, (n, 4)),
                action_lower=rng.normal(0, 2, (n, 4)),
                prev_action_lower=rng.normal(0, 2, (n, 4)),
                action_upper=rng.normal(0, 2, (n, 4)),
                prev_action_upper=rng.normal(0, 2, (n, 4)),
                feet_height_var=rng.uniform(0, 0.1, n),
                terminated=rng.uniform(size=n) < 0.3,
                force_active=rng.uniform(size=n) < 0.5,
            )
            out = compute_rewards(table, inputs)
            for name, contrib in out.weighted.items():
                if name in task:
                    assert np.all(contrib >= 0.0), name
                else:
                    assert np.all(contrib <= 0.0), name


class TestMetricOracles:
    """Eq.-style series metrics against brute-force double loops."""

    def test_tracking_error_matches_double_loop(self):
        from hafo_lab.rewards import tracking_error_upper

        rng = np.random.default_rng(91)
        for _ in range(100):
            T, J = int(rng.integers(1, 40)), int(rng.integers(1, 8))
            actual = rng.normal(size=(T, J))
            target = rng.normal(size=(T, J))
            total = 0.0
            for t in range(T):
                acc = 0.0
                for j in range(J):
                    acc += abs(target[t, j] - actual[t, j])
                total += acc / J
            oracle = total / T
            got = tracking_error_upper(actual, target)
            assert abs(got - oracle) < 1e-12

    def test_velocity_error_constant_offset(self):
        from hafo_lab.rewards import tracking_error_velocity

        actual = np.zeros((30, 1))
        target = np.full((30, 1), 0.2)
        assert tracking_error_velocity(actual, target) == pytest.approx(0.2)

    def test_smoothness_matches_double_loop(self):
        from hafo_lab.rewards import action_smoothness

        rng = np.random.default_rng(92)
        for _ in range(100):
            T, A = int(rng.integers(2, 40)), int(rng.integers(1, 10))
            acts = rng.normal(size=(T, A))
            total = 0.0
            for t in range(1, T):
                total += np.sqrt(np.sum((acts[t] - acts[t - 1]) ** 2))
            oracle = total / (T - 1)
            assert abs(action_smoothness(acts) - oracle) < 1e-12

    def test_smoothness_alternating_channel(self):
        from hafo_lab.rewards import action_smoothness

        acts = np.zeros((10, 3))
        acts[::2, 1] = 0.4
        acts[1::2, 1] = -0.4
        assert action_smoothness(acts) == pytest.approx(0.8)

    def test_metric_input_validation(self):
        from hafo_lab.rewards import action_smoothness, tracking_error_upper

        with pytest.raises(ValueError, match="shapes differ"):
            tracking_error_upper(np.zeros((5, 3)), np.zeros((5, 4)))
        with pytest.raises(ValueError, match="two actions"):
            action_smoothness(np.zeros((1, 4)))

    def test_batched_axis_matches_per_episode(self):
        from hafo_lab.rewards import action_smoothness, tracking_error_upper

        rng = np.random.default_rng(93)
        actual = rng.normal(size=(20, 6, 4))
        target = rng.normal(size=(20, 6, 4))
        batched = tracking_error_upper(actual, target)
        for i in range(6):
            single = tracking_error_upper(actual[:, i], target[:, i])
            assert batched[i] == pytest.approx(single, abs=1e-15)
        acts = rng.normal(size=(20, 6, 8))
        sm = action_smoothness(acts)
        for i in range(6):
            assert sm[i] == pytest.approx(action_smoothness(acts[:, i]), abs=1e-15)


class TestConfigValidation:
    def _minimal(self):
        return {
            "schema_version": 1,
            "kernel_scale": 0.25,
            "terms": [{"name": "orientation", "weight": -4.0, "gate": "always",
                       "stream": "both"}],
        }

    def test_unknown_term_listed(self):
        cfg = self._minimal()
        cfg["terms"][0]["name"] = "mystery"
        with pytest.raises(ConfigError, match="unknown term"):
            RewardTable.from_config(cfg)

    def test_bad_gate(self):
        cfg = self._minimal()
        cfg["terms"][0]["gate"] = "sometimes"
        with pytest.raises(ConfigError, match=r"terms\[0\].gate"):
            RewardTable.from_config(cfg)

    def test_duplicate_term(self):
        cfg = self._minimal()
        cfg["terms"].append(dict(cfg["terms"][0]))
        with pytest.raises(ConfigError, match="duplicate"):
            RewardTable.from_config(cfg)

    def test_kernel_scale_positive(self):
        cfg = self._minimal()
        cfg["kernel_scale"] = 0.0
        with pytest.raises(ConfigError, match="kernel_scale"):
            RewardTable.from_config(cfg)
