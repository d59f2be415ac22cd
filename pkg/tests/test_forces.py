"""Disturbance rig checks: the force laws and their gating modes."""

import numpy as np
import pytest

from hafo_lab.forces import (
    FORCE_TIERS,
    LiftProfile,
    PushSchedule,
    SpringDamperAttachment,
    build_suspension_schedule,
    cap_magnitude,
    compass_directions,
    gate_tension,
    push_sweep_iterator,
    sample_hand_forces,
    spring_damper_force,
    stiffness_only_force,
    tier_by_name,
)
from hafo_lab.robot import build_model
from hafo_lab.sim import ExternalLoad, SimParams, SimState, step

from test_sim import link_chain


class TestForceLaw:
    def test_spring_damper_componentwise(self):
        rng = np.random.default_rng(12)
        for _ in range(30):
            x = rng.normal(size=(4, 2))
            xd = rng.normal(size=(4, 2))
            x_des = rng.normal(size=(4, 2))
            xd_des = rng.normal(size=(4, 2))
            kp, kd = rng.uniform(1, 100, size=2)
            f = spring_damper_force(kp, kd, x_des, x, xd_des, xd)
            np.testing.assert_array_equal(f, kp * (x_des - x) + kd * (xd_des - xd))

    def test_stiffness_only_is_zero_damping_case(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(5, 2))
        x_des = rng.normal(size=(5, 2))
        xd = rng.normal(size=(5, 2))
        np.testing.assert_array_equal(
            stiffness_only_force(40.0, x_des, x),
            spring_damper_force(40.0, 0.0, x_des, x, 0.0, xd),
        )

    def test_rest_length_zero_force(self):
        x = np.array([0.3, 1.2])
        assert np.all(spring_damper_force(50.0, 5.0, x, x) == 0.0)


class TestGating:
    def test_tension_gate_zeroes_pushing_forces(self):
        f = np.array([[1.0, 2.0], [3.0, -0.1], [5.0, 0.0], [-2.0, 0.4]])
        g = gate_tension(f)
        np.testing.assert_array_equal(g[0], f[0])
        np.testing.assert_array_equal(g[1], [0.0, 0.0])
        np.testing.assert_array_equal(g[2], [0.0, 0.0])
        np.testing.assert_array_equal(g[3], f[3])

    def test_cap_preserves_direction(self):
        f = np.array([[30.0, 40.0], [0.3, 0.4], [0.0, 0.0]])
        capped = cap_magnitude(f, 5.0)
        np.testing.assert_allclose(capped[0], [3.0, 4.0], atol=1e-12)
        np.testing.assert_array_equal(capped[1], f[1])
        np.testing.assert_array_equal(capped[2], f[2])
        norms = np.linalg.norm(capped, axis=-1)
        assert np.all(norms <= 5.0 + 1e-12)

    def test_attachment_applies_gate_cap_and_scale(self):
        att = SpringDamperAttachment(
            point="pelvis", kp=100.0, kd=0.0,
            anchor=np.array([0.0, 1.0]), tension_only=True, force_cap=20.0,
        )
        # below the anchor: pulls up, capped from 100 N to 20 N
        f = att.force(np.array([[0.0, 0.0]]), np.zeros((1, 2)))
        np.testing.assert_allclose(f, [[0.0, 20.0]], atol=1e-12)
        # above the anchor: would push down, gated to zero
        f = att.force(np.array([[0.0, 2.0]]), np.zeros((1, 2)))
        np.testing.assert_array_equal(f, [[0.0, 0.0]])
        # curriculum scaling acts after the cap
        f = att.force(np.array([[0.0, 0.0]]), np.zeros((1, 2)), scale=0.25)
        np.testing.assert_allclose(f, [[0.0, 5.0]], atol=1e-12)

    def test_attachment_per_env_scale(self):
        att = SpringDamperAttachment(
            point="pelvis", kp=10.0, kd=0.0, anchor=np.zeros(2))
        pos = np.array([[1.0, 0.0], [1.0, 0.0]])
        f = att.force(pos, np.zeros((2, 2)), scale=np.array([1.0, 0.0]))
        np.testing.assert_allclose(f[0], [-10.0, 0.0], atol=1e-12)
        np.testing.assert_array_equal(f[1], [0.0, 0.0])


class TestDampedOscillatorOracle:
    """A suspended mass must follow the closed-form underdamped solution."""

    def test_vertical_oscillation_matches_ode(self):
        cfg = link_chain(1, link_mass=1.0, base_mass=2.0)
        model = build_model(cfg)
        dt = 1.0 / 3840.0
        params = SimParams(dt=dt, armature=0.0)
        state = SimState.standing(model, 1, height_margin=10.0)
        z0 = state.base[0, 1]
        kp, kd = 200.0, 6.0
        m = model.total_mass
        anchor = np.array([0.0, z0 + 1.0])
        att = SpringDamperAttachment(point="pelvis", kp=kp, kd=kd, anchor=anchor)

        t_end = 2.0
        n = round(t_end / dt)
        for _ in range(n):
            f = att.force(state.base[:, :2], state.base_vel[:, :2])
            load = ExternalLoad(link=0, offset=np.zeros(2), force=f)
            state, _ = step(model, params, state, np.zeros((1, 1)), [load])

        # z(t) = z_eq + exp(-c t) (A cos wd t + B sin wd t), from rest at z0
        z_eq = anchor[1] - m * 9.81 / kp
        w0 = np.sqrt(kp / m)
        c = kd / (2 * m)
        wd = np.sqrt(w0**2 - c**2)
        a0 = z0 - z_eq
        expected = z_eq + np.exp(-c * t_end) * (
            a0 * np.cos(wd * t_end) + c * a0 / wd * np.sin(wd * t_end)
        )
        assert state.base[0, 1] == pytest.approx(expected, abs=2e-3)
        # the pendulum link hangs along the force axis and must stay put
        assert abs(state.q[0, 0]) < 1e-9


class TestTiersAndPushes:
    def test_tier_magnitudes(self):
        assert [t.name for t in FORCE_TIERS] == ["S", "N", "L"]
        assert [t.magnitude for t in FORCE_TIERS] == [10.0, 30.0, 50.0]
        assert tier_by_name("N").magnitude == 30.0
        with pytest.raises(KeyError):
            tier_by_name("XL")

    def test_push_window_and_direction(self):
        push = PushSchedule(start=1.0, duration=0.2, magnitude=250.0, direction=0.0)
        assert np.all(push.force_at(0.99) == 0.0)
        np.testing.assert_allclose(push.force_at(1.0), [250.0, 0.0])
        np.testing.assert_allclose(push.force_at(1.19), [250.0, 0.0])
        assert np.all(push.force_at(1.2) == 0.0)

    def test_push_sagittal_projection(self):
        back = PushSchedule(start=0.0, duration=0.1, magnitude=100.0, direction=np.pi)
        np.testing.assert_allclose(back.force_at(0.05), [-100.0, 0.0], atol=1e-12)
        side = PushSchedule(start=0.0, duration=0.1, magnitude=100.0,
                            direction=np.pi / 2)
        np.testing.assert_allclose(side.force_at(0.05), [0.0, 0.0], atol=1e-12)
        assert side.lateral_component == pytest.approx(100.0)

    def test_push_vectorized_times(self):
        push = PushSchedule(start=0.5, duration=0.25, magnitude=60.0, direction=0.0)
        t = np.array([0.0, 0.5, 0.6, 0.74, 0.75, 1.0])
        f = push.force_at(t)
        np.testing.assert_allclose(f[:, 0], [0.0, 60.0, 60.0, 60.0, 0.0, 0.0])

    def test_sustained_push_never_ends(self):
        push = PushSchedule(start=2.0, duration=0.0, magnitude=40.0,
                            direction=0.0, mode="sustained")
        assert push.end == np.inf
        np.testing.assert_allclose(push.force_at(1e9), [40.0, 0.0])
        assert np.all(push.force_at(1.99) == 0.0)

    def test_push_validation(self):
        with pytest.raises(ValueError, match="mode"):
            PushSchedule(0.0, 1.0, 10.0, 0.0, mode="ramp")
        with pytest.raises(ValueError, match="magnitude"):
            PushSchedule(0.0, 1.0, -10.0, 0.0)
        with pytest.raises(ValueError, match="duration"):
            PushSchedule(0.0, 0.0, 10.0, 0.0, mode="transient")


class TestHandForces:
    def test_magnitudes_exact(self):
        rng = np.random.default_rng(31)
        forces = sample_hand_forces(tier_by_name("L"), rng, n=200)
        assert forces.shape == (200, 2, 2)
        norms = np.linalg.norm(forces, axis=-1)
        np.testing.assert_allclose(norms, 50.0, atol=1e-12)

    def test_zero_tier_gives_zero_loads(self):
        from hafo_lab.forces import ForceTier

        rng = np.random.default_rng(32)
        forces = sample_hand_forces(ForceTier("Z", 0.0), rng, n=10)
        assert np.all(forces == 0.0)

    def test_direction_uniformity_chi_square(self):
        from scipy import stats

        rng = np.random.default_rng(33)
        forces = sample_hand_forces(tier_by_name("N"), rng, n=5000)
        angles = np.arctan2(forces[..., 1], forces[..., 0]).ravel()
        bins = 16
        counts, _ = np.histogram(angles, bins=bins, range=(-np.pi, np.pi))
        expected = angles.size / bins
        chi2 = float(np.sum((counts - expected) ** 2 / expected))
        assert chi2 < stats.chi2.ppf(0.99, bins - 1)

    def test_hands_draw_independent_directions(self):
        rng = np.random.default_rng(34)
        forces = sample_hand_forces(tier_by_name("S"), rng, n=100)
        assert np.any(np.abs(forces[:, 0] - forces[:, 1]) > 1.0)


class TestPushSweep:
    def test_counting_and_order(self):
        schedules = push_sweep_iterator(compass_directions(8),
                                        [100.0, 50.0, 150.0])
        assert len(schedules) == 24
        for d in range(8):
            mags = [s.magnitude for s in schedules[3 * d:3 * d + 3]]
            assert mags == sorted(mags)
            assert all(s.direction == pytest.approx(d * np.pi / 4)
                       for s in schedules[3 * d:3 * d + 3])

    def test_transient_duration_is_one_second(self):
        schedules = push_sweep_iterator(compass_directions(4), [10.0])
        assert all(s.mode == "transient" and s.duration == 1.0
                   for s in schedules)

    def test_sustained_sweep(self):
        schedules = push_sweep_iterator(compass_directions(2), [10.0],
                                        mode="sustained")
        assert all(s.end == np.inf for s in schedules)

    def test_empty_schedule_rejected(self):
        with pytest.raises(ValueError, match="nonempty"):
            push_sweep_iterator(compass_directions(8), [])
        with pytest.raises(ValueError, match="direction"):
            compass_directions(0)


class TestLiftProfile:
    def test_window_arithmetic(self):
        profile = LiftProfile(lift_height=1.0, lift_rate=0.5, hold=3.0,
                              lower_rate=0.5)
        assert profile.lift_time == pytest.approx(2.0)
        assert profile.lower_time == pytest.approx(2.0)
        assert profile.total_duration == pytest.approx(7.0)
        att = build_suspension_schedule(
            profile, np.random.default_rng(0), standing_height=0.8,
            mass=27.0, start=1.0, margin=0.5, anchor_jitter=0.0)
        assert att.active_window == (1.0, 1.0 + 7.0 + 0.5)

    def test_offset_piecewise(self):
        profile = LiftProfile(lift_height=0.6, lift_rate=0.3, hold=2.0,
                              lower_rate=0.6)
        assert profile.offset_at(-1.0) == (0.0, 0.0)
        assert profile.offset_at(1.0) == pytest.approx((0.3, 0.3))
        assert profile.offset_at(2.5) == pytest.approx((0.6, 0.0))
        off, rate = profile.offset_at(4.5)
        assert off == pytest.approx(0.6 - 0.6 * 0.5)
        assert rate == pytest.approx(-0.6)
        assert profile.offset_at(100.0) == (0.0, 0.0)

    def test_validation(self):
        with pytest.raises(ValueError, match="positive"):
            LiftProfile(0.0, 0.5, 1.0, 0.5)
        with pytest.raises(ValueError, match="hold"):
            LiftProfile(0.5, 0.5, -1.0, 0.5)


class TestSuspensionRig:
    def make_rig(self, **kwargs):
        profile = LiftProfile(lift_height=0.5, lift_rate=0.25, hold=3.0,
                              lower_rate=0.25)
        defaults = dict(standing_height=0.8, mass=27.0, anchor_jitter=0.0)
        defaults.update(kwargs)
        return build_suspension_schedule(profile, np.random.default_rng(5),
                                         **defaults)

    def test_anchor_tracks_profile(self):
        rig = self.make_rig()
        x0, v0 = rig.desired_at(0.0)
        np.testing.assert_allclose(x0, [0.0, 0.8])
        x1, v1 = rig.desired_at(1.0)
        np.testing.assert_allclose(x1, [0.0, 0.8 + 0.25])
        assert v1[1] == pytest.approx(0.25)
        x_hold, v_hold = rig.desired_at(3.0)
        np.testing.assert_allclose(x_hold, [0.0, 1.3])
        assert v_hold[1] == 0.0

    def test_tension_only_rope(self):
        rig = self.make_rig()
        pushing = rig.force_at(3.0, np.array([0.0, 2.0]), np.zeros(2))
        assert np.all(pushing == 0.0)
        pulling = rig.force_at(3.0, np.array([0.0, 1.0]), np.zeros(2))
        assert pulling[1] > 0.0

    def test_force_zero_outside_window(self):
        rig = self.make_rig(start=1.0)
        pos, vel = np.array([0.0, 0.5]), np.zeros(2)
        assert np.all(rig.force_at(0.5, pos, vel) == 0.0)
        assert np.any(rig.force_at(1.5, pos, vel) != 0.0)
        assert np.all(rig.force_at(100.0, pos, vel) == 0.0)

    def test_dropout_kills_force_forever(self):
        rig = self.make_rig(dropout_after=3.5)
        rng = np.random.default_rng(8)
        pos = np.array([0.0, 0.5])
        vel = np.zeros(2)
        for _ in range(10_000):
            t = float(rng.uniform(3.5, 1e6))
            p = pos + rng.normal(0, 0.5, 2)
            v = vel + rng.normal(0, 1.0, 2)
            assert np.all(rig.force_at(t, p, v) == 0.0)
        assert np.any(rig.force_at(3.4, pos, vel) != 0.0)

    def test_no_dropout_force_ends_only_at_window(self):
        rig = self.make_rig()
        lo, hi = rig.active_window
        pos = np.array([0.0, 0.5])
        for t in np.linspace(lo, hi, 101)[:-1]:
            assert np.any(rig.force_at(float(t), pos, np.zeros(2)) != 0.0)
        assert np.all(rig.force_at(hi, pos, np.zeros(2)) == 0.0)

    def test_quasi_static_hold_force_matches_weight(self):
        """Point mass hung from the rig at full lift: spring force equals
        the weight once transients die out."""
        mass = 27.0
        rig = self.make_rig(mass=mass)
        g = 9.81
        dt = 1.0 / 960.0
        pos = np.array([0.0, 0.8])
        vel = np.zeros(2)
        t = 0.0
        mid_hold = rig.profile.lift_time + 1.5
        while t < mid_hold:
            f = rig.force_at(t, pos, vel)
            acc = f / mass + np.array([0.0, -g])
            vel = vel + dt * acc
            pos = pos + dt * vel
            t += dt
        f = rig.force_at(t, pos, vel)
        assert abs(np.linalg.norm(f) - mass * g) / (mass * g) < 0.10

    def test_damped_settles_undamped_rings(self):
        """Step response comparison: the springy rope without damping keeps
        oscillating at an amplitude well above the damped rig's band."""
        mass = 1.0
        kp = 100.0
        step_size = 0.1
        dt = 1.0 / 2400.0

        def simulate(stiffness_only):
            att = SpringDamperAttachment(
                point="pelvis", kp=kp,
                kd=0.0 if stiffness_only else 2.0 * np.sqrt(kp * mass),
                anchor=np.array([step_size, 0.0]),
                stiffness_only=stiffness_only)
            pos = np.zeros(2)
            vel = np.zeros(2)
            xs = []
            for _ in range(int(6.0 / dt)):
                f = att.force(pos, vel)
                vel = vel + dt * f / mass
                pos = pos + dt * vel
                xs.append(pos[0])
            return np.asarray(xs)

        damped = simulate(False)
        undamped = simulate(True)
        tail = slice(int(len(damped) * 2 / 3), None)
        damped_band = np.abs(damped[tail] - step_size).max()
        undamped_amp = np.abs(undamped[tail] - step_size).max()
        assert undamped_amp >= 3.0 * damped_band
        assert undamped_amp > 0.09
