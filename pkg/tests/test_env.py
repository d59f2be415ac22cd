"""Vectorized environment checks: layouts, randomization, determinism,
actuation delay, termination and the disturbance scenarios."""

import dataclasses

import numpy as np
import pytest

from hafo_lab.env import (
    SCENARIO_NAMES,
    DrRanges,
    ObsLayout,
    PrivilegedLayout,
    ScenarioConfig,
    VecEnv,
    sample_commands,
    sample_dr,
    scale_disturbances,
    scenario_preset,
)
from hafo_lab.forces import PushSchedule
from hafo_lab.robot import build_model


@pytest.fixture(scope="module")
def g1():
    return build_model("g1-planar")


def quiet_env(model, scenario=None, n_envs=2, seed=0, **kwargs):
    """Env with every randomization interval collapsed; fully repeatable."""
    kwargs.setdefault("dr_ranges", DrRanges.none())
    kwargs.setdefault("joint_noise", 0.0)
    if scenario is None:
        scenario = dataclasses.replace(
            scenario_preset("locomotion"), stance_probability=1.0)
    return VecEnv(model, scenario, n_envs=n_envs, master_seed=seed, **kwargs)


def drive(env, n_steps, action_lower=None):
    """Step with a held lower action and the blended upper reference."""
    if action_lower is None:
        action_lower = np.zeros((env.n_envs, env.n_lower))
    out = None
    for _ in range(n_steps):
        out = env.step(action_lower, env.theta_ref())
    return out


class TestLayouts:
    def test_sizes(self, g1):
        lay = ObsLayout.for_model(g1)
        priv = PrivilegedLayout.for_model(g1)
        assert lay.size == 35
        assert priv.size == 45

    @pytest.mark.parametrize("cls", [ObsLayout, PrivilegedLayout])
    def test_slices_tile_without_gaps(self, cls):
        lay = cls.build(4, 4)
        covered = []
        for name in lay.names():
            s = getattr(lay, name)
            covered.extend(range(s.start, s.stop))
        assert covered == list(range(lay.size))

    def test_privileged_extends_actor_layout(self, g1):
        lay = ObsLayout.for_model(g1)
        priv = PrivilegedLayout.for_model(g1)
        for name in lay.names():
            assert getattr(lay, name) == getattr(priv, name)
        assert priv.base_lin_vel.start >= lay.size
        assert priv.point_forces == slice(37, 45)

    def test_actor_layout_has_no_privileged_channels(self, g1):
        lay = ObsLayout.for_model(g1)
        assert not hasattr(lay, "base_lin_vel")
        assert not hasattr(lay, "point_forces")
        assert "base_lin_vel" not in lay.names()

    def test_field_widths(self, g1):
        lay = ObsLayout.for_model(g1)
        widths = {
            "base_ang_vel": 1, "projected_gravity": 2, "commands": 4,
            "upper_command": 4, "dof_pos": 8, "dof_vel": 8,
            "last_action_lower": 4, "last_action_upper": 4,
        }
        for name, w in widths.items():
            s = getattr(lay, name)
            assert s.stop - s.start == w


class TestDomainRandomization:
    def test_draws_stay_inside_every_interval(self):
        ranges = DrRanges()
        rng = np.random.default_rng(7)
        for _ in range(10_000):
            d = sample_dr(ranges, rng, n_links=11)
            assert ranges.friction[0] <= d.friction <= ranges.friction[1]
            assert ranges.pd_scale[0] <= d.pd_scale <= ranges.pd_scale[1]
            assert ranges.base_mass_delta[0] <= d.base_mass_delta \
                <= ranges.base_mass_delta[1]
            assert d.link_mass_scale.shape == (10,)
            assert np.all(d.link_mass_scale >= ranges.link_mass_scale[0])
            assert np.all(d.link_mass_scale <= ranges.link_mass_scale[1])
            assert np.all(np.abs(d.base_com_offset) <= ranges.base_com_offset)
            assert ranges.control_delay_ms[0] <= d.control_delay_ms \
                <= ranges.control_delay_ms[1]

    def test_draws_fill_the_intervals(self):
        ranges = DrRanges()
        rng = np.random.default_rng(8)
        fr = np.array([sample_dr(ranges, rng, 11).friction for _ in range(2000)])
        lo, hi = ranges.friction
        assert fr.min() < lo + 0.1 * (hi - lo)
        assert fr.max() > hi - 0.1 * (hi - lo)

    def test_none_collapses_everything(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            d = sample_dr(DrRanges.none(), rng, 11)
            assert d.friction == 0.8
            assert d.pd_scale == 1.0
            assert d.base_mass_delta == 0.0
            np.testing.assert_array_equal(d.link_mass_scale, np.ones(10))
            np.testing.assert_array_equal(d.base_com_offset, np.zeros(2))
            assert d.control_delay_ms == 0.0

    def test_validation(self):
        with pytest.raises(ValueError, match="friction"):
            DrRanges(friction=(0.5, 0.2))
        with pytest.raises(ValueError, match="positive"):
            DrRanges(friction=(0.0, 1.0))
        with pytest.raises(ValueError, match="base_com_offset"):
            DrRanges(base_com_offset=-0.1)
        with pytest.raises(ValueError, match="control_delay_ms"):
            DrRanges(control_delay_ms=(-1.0, 5.0))

    def test_applied_to_env_dynamics(self, g1):
        env = VecEnv(g1, scenario_preset("locomotion"), n_envs=64, master_seed=4)
        env.reset()
        arr = g1.arrays
        ranges = DrRanges()
        assert np.all(env.dyn.friction >= ranges.friction[0])
        assert np.all(env.dyn.friction <= ranges.friction[1])
        base_delta = env.dyn.masses[:, 0] - arr.masses[0]
        assert np.all(base_delta >= ranges.base_mass_delta[0])
        assert np.all(base_delta <= ranges.base_mass_delta[1])
        link_scale = env.dyn.masses[:, 1:] / arr.masses[1:]
        assert np.all(link_scale >= ranges.link_mass_scale[0] - 1e-12)
        assert np.all(link_scale <= ranges.link_mass_scale[1] + 1e-12)
        com_shift = env.dyn.coms[:, 0] - arr.coms[0]
        assert np.all(np.abs(com_shift) <= ranges.base_com_offset)
        np.testing.assert_array_equal(env.dyn.inertias, np.tile(arr.inertias, (64, 1)))
        assert np.all(env._pd_scale >= ranges.pd_scale[0])
        assert np.all(env._pd_scale <= ranges.pd_scale[1])
        # at the bundled control rate the whole delay interval rounds to zero
        assert np.all(env._delay_steps == 0)


class TestScenarios:
    def test_presets_exist(self):
        for name in SCENARIO_NAMES:
            sc = scenario_preset(name)
            assert sc.name == name

    def test_unknown_preset_rejected(self):
        with pytest.raises(ValueError, match="unknown scenario"):
            scenario_preset("parkour")

    def test_scale_disturbances_multiplies(self):
        sc = dataclasses.replace(
            scenario_preset("mixed"),
            pushes=(PushSchedule(start=1.0, duration=0.5, magnitude=100.0,
                                 direction=0.0),))
        half = scale_disturbances(sc, 0.5)
        assert half.hand_force_magnitude == sc.hand_force_magnitude * 0.5
        assert half.push_magnitude == sc.push_magnitude * 0.5
        assert half.rig_force_cap == sc.rig_force_cap * 0.5
        assert half.pushes[0].magnitude == 50.0

    def test_scale_disturbances_composes(self):
        sc = scenario_preset("mixed")
        a = scale_disturbances(scale_disturbances(sc, 0.7), 0.3)
        b = scale_disturbances(sc, 0.7 * 0.3)
        assert a.hand_force_magnitude == pytest.approx(b.hand_force_magnitude,
                                                       rel=1e-12)
        assert a.push_magnitude == pytest.approx(b.push_magnitude, rel=1e-12)
        assert a.rig_force_cap == pytest.approx(b.rig_force_cap, rel=1e-12)

    def test_scale_zero_kills_everything(self):
        sc = scale_disturbances(scenario_preset("mixed"), 0.0)
        assert sc.hand_force_magnitude == 0.0
        assert sc.push_magnitude == 0.0
        assert sc.rig_force_cap == 0.0

    def test_none_cap_stays_none(self):
        sc = scale_disturbances(scenario_preset("locomotion"), 2.0)
        assert sc.rig_force_cap is None

    def test_validation(self):
        with pytest.raises(ValueError, match="stance_probability"):
            ScenarioConfig(stance_probability=1.5)
        with pytest.raises(ValueError, match="suspension_start"):
            ScenarioConfig(suspension_start="orbit")
        with pytest.raises(ValueError, match="episode_length"):
            ScenarioConfig(episode_length=0.0)
        with pytest.raises(ValueError, match="hand_hold_period"):
            ScenarioConfig(hand_hold_period=0.0)

    def test_sample_commands_ranges(self):
        sc = scenario_preset("locomotion")
        rng = np.random.default_rng(11)
        n_stance = 0
        for _ in range(10_000):
            c = sample_commands(rng, sc)
            assert c.shape == (4,)
            if c[3] == 1.0:
                n_stance += 1
                assert c[0] == c[1] == c[2] == 0.0
            else:
                assert sc.vel_x_range[0] <= c[0] <= sc.vel_x_range[1]
                assert sc.vel_y_range[0] <= c[1] <= sc.vel_y_range[1]
                assert sc.yaw_range[0] <= c[2] <= sc.yaw_range[1]
        assert 0.2 < n_stance / 10_000 < 0.3

    def test_stance_probability_extremes(self):
        rng = np.random.default_rng(12)
        always = dataclasses.replace(scenario_preset("locomotion"),
                                     stance_probability=1.0)
        never = dataclasses.replace(scenario_preset("locomotion"),
                                    stance_probability=0.0)
        for _ in range(100):
            assert sample_commands(rng, always)[3] == 1.0
            assert sample_commands(rng, never)[3] == 0.0


class TestReset:
    def test_same_seed_same_reset(self, g1):
        sc = scenario_preset("mixed")
        a = VecEnv(g1, sc, n_envs=6, master_seed=21)
        b = VecEnv(g1, sc, n_envs=6, master_seed=21)
        obs_a, priv_a = a.reset()
        obs_b, priv_b = b.reset()
        np.testing.assert_array_equal(obs_a, obs_b)
        np.testing.assert_array_equal(priv_a, priv_b)
        np.testing.assert_array_equal(a.state.q, b.state.q)
        np.testing.assert_array_equal(a.dyn.masses, b.dyn.masses)

    def test_different_seed_different_reset(self, g1):
        sc = scenario_preset("locomotion")
        obs_a, _ = VecEnv(g1, sc, n_envs=6, master_seed=1).reset()
        obs_b, _ = VecEnv(g1, sc, n_envs=6, master_seed=2).reset()
        assert not np.array_equal(obs_a, obs_b)

    def test_reset_observation_content(self, g1):
        env = quiet_env(g1, n_envs=3, seed=5)
        obs, priv = env.reset()
        lay = env.obs_layout
        # upright base: gravity projects straight down, no angular rate
        np.testing.assert_allclose(obs[:, lay.projected_gravity],
                                   np.tile([0.0, -1.0], (3, 1)), atol=1e-12)
        np.testing.assert_array_equal(obs[:, lay.base_ang_vel], np.zeros((3, 1)))
        np.testing.assert_array_equal(obs[:, lay.commands], env.command)
        np.testing.assert_array_equal(obs[:, lay.dof_pos],
                                      env.state.q - g1.arrays.q_default)
        np.testing.assert_array_equal(obs[:, lay.dof_vel], np.zeros((3, 8)))
        np.testing.assert_array_equal(obs[:, lay.last_action_lower],
                                      np.zeros((3, 4)))
        # privileged view copies the actor fields verbatim
        np.testing.assert_array_equal(priv[:, :lay.size], obs)
        np.testing.assert_array_equal(priv[:, env.priv_layout.point_forces],
                                      np.zeros((3, 8)))

    def test_joint_noise_bounded(self, g1):
        env = VecEnv(g1, scenario_preset("locomotion"), n_envs=32,
                     master_seed=6, joint_noise=0.05)
        env.reset()
        dq = env.state.q - g1.arrays.q_default
        assert np.all(np.abs(dq) <= 0.05 + 1e-12)
        assert np.abs(dq).max() > 0.01

    def test_feet_gap_window_prefilled(self, g1):
        env = VecEnv(g1, scenario_preset("locomotion"), n_envs=4, master_seed=7)
        env.reset()
        var = np.var(env._gap_buf, axis=0)
        np.testing.assert_allclose(var, 0.0, atol=1e-20)


class TestDeterminism:
    def test_same_seed_same_trajectory(self, g1):
        sc = dataclasses.replace(scenario_preset("mixed"), episode_length=1.0)
        a = VecEnv(g1, sc, n_envs=4, master_seed=33)
        b = VecEnv(g1, sc, n_envs=4, master_seed=33)
        a.reset()
        b.reset()
        rng = np.random.default_rng(0)
        for _ in range(60):
            act = rng.uniform(-0.5, 0.5, size=(4, 4))
            oa, pa, rla, rua, da, _ = a.step(act, a.theta_ref())
            ob, pb, rlb, rub, db, _ = b.step(act, b.theta_ref())
            np.testing.assert_array_equal(oa, ob)
            np.testing.assert_array_equal(pa, pb)
            np.testing.assert_array_equal(rla, rlb)
            np.testing.assert_array_equal(rua, rub)
            np.testing.assert_array_equal(da, db)

    def test_partition_independence(self, g1):
        sc = dataclasses.replace(scenario_preset("mixed"), episode_length=0.6)
        big = VecEnv(g1, sc, n_envs=3, master_seed=99)
        obs_big, _ = big.reset()
        rng = np.random.default_rng(1)
        seq = [rng.uniform(-0.3, 0.3, size=(3, 4)) for _ in range(40)]
        traj = []
        for act in seq:
            o, _, rl, _, d, _ = big.step(act, big.theta_ref())
            traj.append((o.copy(), rl.copy(), d.copy()))
        for i in range(3):
            solo = VecEnv(g1, sc, n_envs=1, master_seed=99, index_offset=i)
            o0, _ = solo.reset()
            np.testing.assert_array_equal(o0[0], obs_big[i])
            for k, act in enumerate(seq):
                o, _, rl, _, d, _ = solo.step(act[i:i + 1], solo.theta_ref())
                np.testing.assert_array_equal(o[0], traj[k][0][i])
                assert rl[0] == traj[k][1][i]
                assert d[0] == traj[k][2][i]


class TestControlDelay:
    def test_pinned_delay_steps(self, g1):
        dr = dataclasses.replace(DrRanges.none(), control_delay_ms=(40.0, 40.0))
        env = quiet_env(g1, n_envs=2, dr_ranges=dr)
        env.reset()
        # dt_control = 5/240 s ~ 20.8 ms, so 40 ms is exactly one step late
        assert env.dt_control == pytest.approx(5.0 / 240.0)
        np.testing.assert_array_equal(env._delay_steps, [1, 1])
        assert env._hist_len == 2

    def test_delayed_env_equals_shifted_sequence(self, g1):
        dr_late = dataclasses.replace(DrRanges.none(),
                                      control_delay_ms=(40.0, 40.0))
        a = quiet_env(g1, n_envs=2, seed=42)
        b = quiet_env(g1, n_envs=2, seed=42, dr_ranges=dr_late)
        a.reset()
        b.reset()
        th = a.theta_ref()
        rng = np.random.default_rng(0)
        seq = [rng.uniform(-0.5, 0.5, size=(2, 4)) for _ in range(12)]
        # the first action lands immediately even with a one-step delay,
        # because a fresh episode has no older action to replay
        shifted = [seq[0]] + seq[:-1]
        for sa, sb in zip(shifted, seq):
            a.step(sa, th)
            b.step(sb, th)
            np.testing.assert_array_equal(a.state.q, b.state.q)
            np.testing.assert_array_equal(a.state.base, b.state.base)

    def test_zero_delay_buffer_is_flat(self, g1):
        env = quiet_env(g1, n_envs=2)
        env.reset()
        assert env._hist_len == 1
        np.testing.assert_array_equal(env._delay_steps, [0, 0])


class TestStability:
    def test_standing_survives_zero_actions(self, g1):
        env = quiet_env(g1, n_envs=4, seed=0)
        env.reset()
        zero = np.zeros((4, env.n_lower))
        for _ in range(100):
            obs, priv, rl, ru, done, info = env.step(zero, env.theta_ref())
            assert not done.any()
        assert np.all(env.state.base[:, 1] > 0.6)
        assert np.all(np.abs(env.state.base[:, 2]) < 0.2)

    def test_randomized_envs_survive_early_steps(self, g1):
        env = VecEnv(g1, scenario_preset("locomotion"), n_envs=8, master_seed=13)
        env.reset()
        _, _, _, _, done, _ = drive(env, 20)
        assert not done.any()


class TestTermination:
    def test_pitch_failure_terminates_and_resets(self, g1):
        env = quiet_env(g1, n_envs=2)
        env.reset()
        env.state.base[0, 2] = 1.5
        obs, priv, rl, ru, done, info = drive(env, 1)
        assert done[0] and info["terminated"][0]
        assert not done[1]
        # env 0 came back freshly reset
        assert abs(env.state.base[0, 2]) < 0.1
        assert env.steps[0] == 0 and env.steps[1] == 1

    def test_height_failure_terminates(self, g1):
        env = quiet_env(g1, n_envs=2)
        env.reset()
        env.state.base[1, 1] = 0.2
        _, _, _, _, done, info = drive(env, 1)
        assert done[1] and info["terminated"][1]

    def test_suspension_exempts_height_not_pitch(self, g1):
        env = quiet_env(g1, scenario_preset("suspension"), n_envs=2, seed=3)
        env.reset()
        assert env.susp_on.all()
        env.state.base[0, 1] = 0.2   # would fail on the ground
        env.state.base[1, 2] = 1.5   # pitch failure stays armed
        _, _, _, _, done, info = drive(env, 1)
        assert not info["terminated"][0]
        assert info["terminated"][1]

    def test_low_base_terminates_once_rig_window_closes(self, g1):
        env = quiet_env(g1, scenario_preset("suspension"), n_envs=1, seed=3)
        env.reset()
        env.susp_on[0] = False
        env.state.base[0, 1] = 0.2
        _, _, _, _, done, info = drive(env, 1)
        assert info["terminated"][0]

    def test_timeout_sets_flag_without_termination(self, g1):
        sc = dataclasses.replace(scenario_preset("locomotion"),
                                 stance_probability=1.0, episode_length=0.5)
        env = quiet_env(g1, sc, n_envs=2)
        env.reset()
        n_steps = env.max_steps
        for k in range(n_steps):
            _, _, _, _, done, info = env.step(np.zeros((2, 4)), env.theta_ref())
        assert done.all()
        assert info["timeouts"].all()
        assert not info["terminated"].any()
        assert np.all(env.steps == 0)  # auto-reset happened

    def test_terminal_privileged_precedes_reset(self, g1):
        sc = dataclasses.replace(scenario_preset("locomotion"),
                                 stance_probability=1.0, episode_length=0.25)
        env = quiet_env(g1, sc, n_envs=2)
        env.reset()
        push = 0.3 * np.ones((2, 4))
        for k in range(env.max_steps):
            obs, priv, _, _, done, info = env.step(push, env.theta_ref())
        assert done.all()
        term = info["terminal_privileged"]
        # the pre-reset pose was disturbed; the returned obs is a fresh stand
        lay = env.obs_layout
        assert np.abs(term[:, lay.dof_pos]).max() > 0.05
        assert not np.array_equal(term, priv)

    def test_divergence_flag_and_sanitize(self, g1):
        env = quiet_env(g1, n_envs=2)
        env.reset()
        env.state.q_dot[0, 0] = np.nan
        obs, priv, rl, ru, done, info = drive(env, 1)
        assert info["diverged"][0] and info["terminated"][0]
        assert not info["diverged"][1]
        assert np.isfinite(obs).all() and np.isfinite(priv).all()
        assert np.isfinite(rl).all() and np.isfinite(ru).all()

    def test_huge_velocity_counts_as_divergence(self, g1):
        env = quiet_env(g1, n_envs=1)
        env.reset()
        env.state.q_dot[0, :] = 5e3
        _, _, _, _, _, info = drive(env, 1)
        assert info["diverged"][0]


class TestDisturbances:
    def test_hand_forces_exact_magnitude(self, g1):
        env = VecEnv(g1, scenario_preset("hand_force"), n_envs=16, master_seed=2)
        env.reset()
        norms = np.linalg.norm(env.hand_force, axis=2)
        np.testing.assert_allclose(norms, 30.0, rtol=1e-12)

    def test_force_scale_zero_disarms_hands(self, g1):
        env = VecEnv(g1, scenario_preset("hand_force"), n_envs=8, master_seed=2)
        env.set_difficulty(1.0, 0.0)
        env.reset()
        np.testing.assert_array_equal(env.hand_force, np.zeros((8, 2, 2)))

    def test_hand_forces_enter_privileged_not_actor_obs(self, g1):
        env = quiet_env(g1, scenario_preset("hand_force"), n_envs=2, seed=4)
        env.reset()
        obs, priv, _, _, _, _ = drive(env, 1)
        pf = priv[:, env.priv_layout.point_forces].reshape(2, 4, 2)
        assert np.linalg.norm(pf[:, 1]) > 0.0   # hand_l row
        assert np.linalg.norm(pf[:, 2]) > 0.0   # hand_r row
        assert env._gate_norm.min() > 1.0
        assert obs.shape == (2, env.obs_layout.size)

    def test_locomotion_has_no_gate_forces(self, g1):
        env = quiet_env(g1, n_envs=2)
        env.reset()
        drive(env, 3)
        np.testing.assert_array_equal(env._gate_norm, np.zeros(2))

    def test_fixed_push_displaces_robot(self, g1):
        push = PushSchedule(start=0.2, duration=0.3, magnitude=150.0,
                            direction=0.0)
        sc = dataclasses.replace(scenario_preset("locomotion"),
                                 stance_probability=1.0, pushes=(push,))
        pushed = quiet_env(g1, sc, n_envs=1)
        calm = quiet_env(g1, n_envs=1)
        pushed.reset()
        calm.reset()
        peak_pushed = peak_calm = 0.0
        for _ in range(48):
            drive(pushed, 1)
            drive(calm, 1)
            peak_pushed = max(peak_pushed, abs(pushed.state.base[0, 0]))
            peak_calm = max(peak_calm, abs(calm.state.base[0, 0]))
        assert peak_pushed > 5.0 * max(peak_calm, 1e-4)

    def test_push_excluded_from_force_gate(self, g1):
        push = PushSchedule(start=0.0, duration=10.0, magnitude=100.0,
                            direction=0.0)
        sc = dataclasses.replace(scenario_preset("locomotion"),
                                 stance_probability=1.0, pushes=(push,))
        env = quiet_env(g1, sc, n_envs=1)
        env.reset()
        _, priv, _, _, _, _ = drive(env, 2)
        pf = priv[:, env.priv_layout.point_forces].reshape(1, 4, 2)
        assert np.linalg.norm(pf[0, 0]) > 50.0   # pelvis row sees the push
        assert env._gate_norm[0] == 0.0          # the reward gate does not

    def test_suspension_lifts_and_lowers(self, g1):
        env = quiet_env(g1, scenario_preset("suspension"), n_envs=2, seed=5)
        env.reset()
        h0 = env.state.base[:, 1].copy()
        peak = h0.copy()
        for _ in range(48 * 9):
            env.step(np.zeros((2, 4)), env.theta_ref())
            peak = np.maximum(peak, env.state.base[:, 1])
        assert np.all(peak > h0 + 0.15)
        assert np.all(env.state.base[:, 1] < h0 + 0.08)

    def test_airborne_start_above_standing(self, g1):
        sc = dataclasses.replace(scenario_preset("suspension"),
                                 suspension_start="airborne")
        env = quiet_env(g1, sc, n_envs=3, seed=6)
        env.reset()
        assert np.all(env.state.base[:, 1] > g1.default_base_height + 0.1)
        _, _, _, _, done, _ = drive(env, 10)
        assert not done.any()

    def test_rig_dropout_kills_force(self, g1):
        sc = dataclasses.replace(scenario_preset("suspension"),
                                 rig_start_jitter=0.0, rig_dropout_after=1.0)
        env = quiet_env(g1, sc, n_envs=1, seed=7)
        env.reset()
        drive(env, 24)                    # 0.5 s: rig is pulling
        assert env._gate_norm[0] > 0.0
        drive(env, 48)                    # past the 1 s dropout
        assert env._gate_norm[0] == 0.0

    def test_force_scale_zero_disarms_rig(self, g1):
        env = quiet_env(g1, scenario_preset("suspension"), n_envs=2, seed=8)
        env.set_difficulty(1.0, 0.0)
        env.reset()
        h0 = env.state.base[:, 1].copy()
        for _ in range(48 * 4):
            env.step(np.zeros((2, 4)), env.theta_ref())
        assert np.all(env.state.base[:, 1] < h0 + 0.02)
        assert np.all(env._gate_norm == 0.0)

    def test_random_pushes_appear(self, g1):
        sc = dataclasses.replace(
            scenario_preset("locomotion"), stance_probability=1.0,
            push_magnitude=60.0, push_interval=(0.3, 0.5),
            push_duration=(0.2, 0.3))
        env = VecEnv(g1, sc, n_envs=4, master_seed=9,
                     dr_ranges=DrRanges.none(), joint_noise=0.0)
        env.reset()
        saw_push = False
        for _ in range(96):
            _, priv, _, _, _, _ = env.step(np.zeros((4, 4)), env.theta_ref())
            pf = priv[:, env.priv_layout.point_forces]
            saw_push = saw_push or np.abs(pf).max() > 1.0
        assert saw_push


class TestUpperReference:
    def test_alpha_zero_tracks_measured_pose(self, g1):
        env = quiet_env(g1, n_envs=3)
        env.set_difficulty(0.0, 1.0)
        env.reset()
        np.testing.assert_array_equal(env.theta_ref(),
                                      env.state.q[:, env.upper_slice])

    def test_alpha_one_tracks_clip(self, g1):
        env = quiet_env(g1, n_envs=2)
        env.set_difficulty(1.0, 1.0)
        env.reset()
        expected = np.zeros((2, 4))
        for i in range(2):
            clip = env.clips[env.clip_index[i]]
            expected[i] = clip.sample(env.clip_phase[i] + env.t[i])
        lo = g1.arrays.q_lo[env.upper_slice]
        hi = g1.arrays.q_hi[env.upper_slice]
        np.testing.assert_allclose(env.theta_ref(),
                                   np.clip(expected, lo, hi), atol=1e-12)

    def test_default_anchor_mode(self, g1):
        env = quiet_env(g1, n_envs=2, blend_anchor="default")
        env.set_difficulty(0.0, 1.0)
        env.reset()
        np.testing.assert_allclose(
            env.theta_ref(),
            np.tile(g1.arrays.q_default[env.upper_slice], (2, 1)), atol=1e-12)

    def test_reference_stays_inside_limits(self, g1):
        env = VecEnv(g1, scenario_preset("locomotion"), n_envs=16, master_seed=3)
        env.reset()
        lo = g1.arrays.q_lo[env.upper_slice]
        hi = g1.arrays.q_hi[env.upper_slice]
        for _ in range(25):
            env.step(np.zeros((16, 4)), env.theta_ref())
            ref = env.theta_ref()
            assert np.all(ref >= lo) and np.all(ref <= hi)

    def test_set_difficulty_validation(self, g1):
        env = quiet_env(g1, n_envs=1)
        with pytest.raises(ValueError, match="alpha"):
            env.set_difficulty(1.5, 1.0)
        with pytest.raises(ValueError, match="force_scale"):
            env.set_difficulty(1.0, -0.1)


class TestStepInterface:
    def test_action_shape_validated(self, g1):
        env = quiet_env(g1, n_envs=2)
        env.reset()
        with pytest.raises(ValueError, match="action_lower"):
            env.step(np.zeros((3, 4)), env.theta_ref())
        with pytest.raises(ValueError, match="theta_upper"):
            env.step(np.zeros((2, 4)), np.zeros((2, 5)))

    def test_nonfinite_action_rejected(self, g1):
        env = quiet_env(g1, n_envs=2)
        env.reset()
        bad = np.zeros((2, 4))
        bad[0, 0] = np.nan
        with pytest.raises(ValueError, match="non-finite"):
            env.step(bad, env.theta_ref())

    def test_last_actions_echo_into_obs(self, g1):
        env = quiet_env(g1, n_envs=2)
        env.reset()
        act = np.full((2, 4), 0.3)
        th = env.theta_ref()
        obs, _, _, _, _, _ = env.step(act, th)
        lay = env.obs_layout
        np.testing.assert_array_equal(obs[:, lay.last_action_lower], act)
        np.testing.assert_array_equal(obs[:, lay.last_action_upper], th)

    def test_bad_clip_joint_count_rejected(self, g1):
        from hafo_lab.motions import MotionClip
        bad = {"wide": MotionClip(name="wide", frame_rate=50.0,
                                  frames=np.zeros((10, 6)))}
        with pytest.raises(ValueError, match="upper joints"):
            VecEnv(g1, scenario_preset("locomotion"), n_envs=1, clips=bad)

    def test_invalid_construction(self, g1):
        with pytest.raises(ValueError, match="n_envs"):
            VecEnv(g1, n_envs=0)
        with pytest.raises(ValueError, match="blend_anchor"):
            VecEnv(g1, n_envs=1, blend_anchor="midpoint")
