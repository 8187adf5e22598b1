import numpy as np
from django.test import SimpleTestCase

from rotation import handsim
from rotation.handsim import JOINTS_PER_FINGER, NUM_FINGERS, NUM_JOINTS, HandModel, PhysParams, SimState


class KinematicsTests(SimpleTestCase):

    def setUp(self):
        self.model = HandModel()

    def test_straight_fingers_reach_along_heading(self):
        tips, _ = handsim.fingertip_fk(self.model, np.zeros((1, NUM_JOINTS)))
        reach = sum(self.model.link_lengths)
        for k in range(NUM_FINGERS):
            heading = self.model.headings[k]
            expected = self.model.anchors[k] + reach * np.array([np.cos(heading), np.sin(heading)])
            np.testing.assert_allclose(tips[0, k], expected, atol=1e-12)

    def test_jacobian_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        q = rng.uniform(self.model.lower, self.model.upper, size=(1, NUM_JOINTS))
        _, jac = handsim.fingertip_fk(self.model, q)
        eps = 1e-6
        for k in range(NUM_FINGERS):
            for j in range(4):
                plus, minus = q.copy(), q.copy()
                plus[0, 4 * k + j] += eps
                minus[0, 4 * k + j] -= eps
                numeric = (handsim.fingertip_fk(self.model, plus)[0][0, k]
                           - handsim.fingertip_fk(self.model, minus)[0][0, k]) / (2 * eps)
                np.testing.assert_allclose(jac[0, k, :, j], numeric, rtol=1e-6, atol=1e-9)

    def test_relabelling_fingers_rotates_tips(self):
        rng = np.random.default_rng(1)
        q = rng.uniform(self.model.lower, self.model.upper, size=(1, NUM_JOINTS))
        shifted = np.roll(q, 4, axis=1)
        tips, _ = handsim.fingertip_fk(self.model, q)
        tips_shifted, _ = handsim.fingertip_fk(self.model, shifted)
        for k in range(NUM_FINGERS):
            np.testing.assert_allclose(tips_shifted[0, (k + 1) % NUM_FINGERS],
                                       handsim.rotate(tips[0, k], np.pi / 2), atol=1e-12)

    def test_canonical_grasp_presses_tips_into_disc(self):
        scale = 0.78
        q = handsim.canonical_grasp(self.model, scale)
        self.assertTrue(np.all(q >= self.model.lower) and np.all(q <= self.model.upper))
        tips, _ = handsim.fingertip_fk(self.model, q[None])
        radius = self.model.object_radius * scale - self.model.grasp_squeeze
        np.testing.assert_allclose(np.linalg.norm(tips[0], axis=-1), radius, atol=1e-9)


class ContactTests(SimpleTestCase):

    def setUp(self):
        self.model = HandModel()
        self.params = PhysParams.nominal(1)

    def contacts(self, state):
        tips, jac = handsim.fingertip_fk(self.model, state.q)
        return handsim.contact_forces(state, self.params, self.model, tips, jac), jac

    def test_no_penetration_means_no_force(self):
        state = SimState.at_rest(np.zeros((1, NUM_JOINTS)), center=[[1.0, 1.0]])
        contacts, _ = self.contacts(state)
        self.assertFalse(np.any(contacts.active))
        self.assertFalse(np.any(contacts.forces))
        self.assertFalse(np.any(contacts.reaction))

    def test_one_millimetre_static_penetration(self):
        q = handsim.canonical_grasp(self.model, 0.78)
        tips, _ = handsim.fingertip_fk(self.model, q[None])
        radius = np.linalg.norm(tips[0, 0]) + 0.001
        params = PhysParams.nominal(1, scale=radius / self.model.object_radius)
        state = SimState.at_rest(q[None])
        tips, jac = handsim.fingertip_fk(self.model, state.q)
        contacts = handsim.contact_forces(state, params, self.model, tips, jac)
        np.testing.assert_allclose(contacts.normal_force[0], 0.5, rtol=1e-6)
        self.assertTrue(np.all(np.abs(contacts.tangential_force) <= params.friction[0] * contacts.normal_force + 1e-9))

    def test_friction_cone_and_power_balance_on_random_states(self):
        rng = np.random.default_rng(2)
        n = 64
        q = np.tile(handsim.canonical_grasp(self.model, 0.78), (n, 1)) + rng.uniform(-0.1, 0.1, (n, NUM_JOINTS))
        state = SimState.at_rest(q, center=rng.uniform(-0.005, 0.005, (n, 2)), yaw=rng.uniform(-np.pi, np.pi, n))
        state.qd = rng.normal(0.0, 1.0, (n, NUM_JOINTS))
        state.lin_vel = rng.normal(0.0, 0.05, (n, 2))
        state.ang_vel = rng.normal(0.0, 1.0, n)
        params = PhysParams.nominal(n)
        params.friction = rng.uniform(0.3, 3.0, n)
        tips, jac = handsim.fingertip_fk(self.model, state.q)
        contacts = handsim.contact_forces(state, params, self.model, tips, jac)
        self.assertTrue(np.all(np.abs(contacts.tangential_force)
                               <= params.friction[:, None] * contacts.normal_force + 1e-9))
        # puissance des réactions articulaires = - puissance des forces aux bouts de doigts
        joint_power = np.sum(contacts.reaction * state.qd, axis=1)
        tip_power = -np.sum(contacts.forces * contacts.tip_vel, axis=(1, 2))
        np.testing.assert_allclose(joint_power, tip_power, rtol=1e-6, atol=1e-12)

    def test_contact_jacobian_maps_generalised_velocity(self):
        rng = np.random.default_rng(3)
        q = rng.uniform(self.model.lower, self.model.upper, size=(2, NUM_JOINTS))
        state = SimState.at_rest(q)
        state.qd = rng.normal(size=(2, NUM_JOINTS))
        state.lin_vel = rng.normal(size=(2, 2))
        state.ang_vel = rng.normal(size=2)
        contacts, jac = self.contacts(state)
        G = handsim.contact_jacobian(jac, contacts.arms)
        u = np.concatenate([state.qd, state.lin_vel, state.ang_vel[:, None]], axis=1)
        relative = (G @ u[:, None, :, None])[..., 0]
        point = state.lin_vel[:, None, :] + state.ang_vel[:, None, None] * handsim.perp(contacts.arms)
        np.testing.assert_allclose(relative, point - contacts.tip_vel, atol=1e-12)


class DisturbanceTests(SimpleTestCase):

    def test_fresh_force_magnitude_is_scale_times_mass(self):
        params = PhysParams.nominal(2, mass=0.1)
        params.disturbance_scale = np.array([2.0, 4.0])
        state = SimState.at_rest(np.zeros((2, NUM_JOINTS)))
        force, resampled = handsim.sample_disturbance(state, params, np.array([[0.0, 0.3], [0.1, 0.7]]))
        self.assertTrue(np.all(resampled))
        np.testing.assert_allclose(np.linalg.norm(force, axis=1), [0.2, 0.4])

    def test_force_kept_when_not_resampled(self):
        params = PhysParams.nominal(1, mass=0.1)
        state = SimState.at_rest(np.zeros((1, NUM_JOINTS)))
        state.disturbance = np.array([[0.3, -0.1]])
        force, resampled = handsim.sample_disturbance(state, params, np.array([[0.9, 0.5]]))
        self.assertFalse(resampled[0])
        np.testing.assert_allclose(force, [[0.3, -0.1]])

    def test_decay_over_eighty_milliseconds(self):
        model = HandModel()
        force = handsim.decay_disturbance(np.array([[1.0, 0.0]]), 0.08, model)
        np.testing.assert_allclose(force, [[0.9, 0.0]])


class StepPhysicsTests(SimpleTestCase):

    def setUp(self):
        self.model = HandModel()

    def free_state(self, n=4, seed=0):
        rng = np.random.default_rng(seed)
        q = rng.uniform(self.model.lower + 0.3, self.model.upper - 0.3, size=(n, NUM_JOINTS))
        state = SimState.at_rest(q, center=np.tile([1.0, 1.0], (n, 1)))
        state.qd = rng.normal(0.0, 0.5, (n, NUM_JOINTS))
        state.lin_vel = rng.normal(0.0, 0.1, (n, 2))
        state.ang_vel = rng.normal(0.0, 1.0, n)
        return state

    def grasped_state(self, n=4, seed=0):
        rng = np.random.default_rng(seed)
        q = np.tile(handsim.canonical_grasp(self.model, 0.78), (n, 1)) + rng.uniform(-0.005, 0.005, (n, NUM_JOINTS))
        state = SimState.at_rest(q, center=rng.uniform(-0.0005, 0.0005, (n, 2)), yaw=rng.uniform(-np.pi, np.pi, n))
        state.qd = rng.normal(0.0, 0.5, (n, NUM_JOINTS))
        state.lin_vel = rng.normal(0.0, 0.05, (n, 2))
        state.ang_vel = rng.normal(0.0, 1.0, n)
        return state

    def assert_energy_never_rises(self, state, params, steps=5):
        energy = handsim.kinetic_energy(state, params, self.model)
        for _ in range(steps):
            state = handsim.step_physics(state, state.q, params, self.model, disturbances=False,
                                         passive=True, bias=False)
            new_energy = handsim.kinetic_energy(state, params, self.model)
            self.assertTrue(np.all(new_energy <= energy * (1.0 + 1e-12) + 1e-15),
                            msg=f"{new_energy - energy}")
            energy = new_energy
        return state

    def test_passive_motion_dissipates_energy(self):
        self.assert_energy_never_rises(self.free_state(), PhysParams.nominal(4))

    def test_passive_contacts_dissipate_energy(self):
        params = PhysParams.nominal(4)
        params.friction = np.array([0.3, 1.0, 2.0, 3.0])
        state = self.grasped_state()
        tips, jac = handsim.fingertip_fk(self.model, state.q)
        contacts = handsim.contact_forces(state, params, self.model, tips, jac)
        self.assertTrue(np.all(contacts.active.sum(axis=1) >= 2))
        self.assert_energy_never_rises(state, params)

    def test_passive_grasp_at_rest_stays_at_rest(self):
        q = handsim.canonical_grasp(self.model, 0.78)[None]
        state = SimState.at_rest(q)
        params = PhysParams.nominal(1)
        after = handsim.step_physics(state, q, params, self.model, disturbances=False, passive=True, bias=False)
        self.assertTrue(np.all(after.contact_active))
        self.assertLessEqual(float(handsim.kinetic_energy(after, params, self.model)[0]), 1e-15)

    def test_uncontacted_spin_advances_yaw(self):
        model = HandModel(angular_drag=0.0)
        state = SimState.at_rest(np.zeros((1, NUM_JOINTS)), center=[[1.0, 1.0]])
        state.ang_vel[:] = 1.0
        params = PhysParams.nominal(1)
        for step in range(1, 4):
            state = handsim.step_physics(state, state.q, params, model, disturbances=False, bias=False)
            self.assertAlmostEqual(float(state.yaw[0]), 0.05 * step, places=12)
            self.assertAlmostEqual(float(state.rotation[0]), 0.05 * step, places=12)
            self.assertAlmostEqual(float(state.ang_vel[0]), 1.0, places=12)

    def test_relabelling_fingers_rotates_trajectory(self):
        params = PhysParams.nominal(1)
        params.com_offset = np.array([[0.004, -0.002]])
        state = self.grasped_state(n=1, seed=7)
        turned = state.copy()
        turned.q = np.roll(state.q, JOINTS_PER_FINGER, axis=1)
        turned.qd = np.roll(state.qd, JOINTS_PER_FINGER, axis=1)
        turned.center = handsim.rotate(state.center, np.pi / 2)
        turned.lin_vel = handsim.rotate(state.lin_vel, np.pi / 2)
        turned.yaw = state.yaw + np.pi / 2
        targets = state.q + 0.05
        for _ in range(5):
            state = handsim.step_physics(state, targets, params, self.model, disturbances=False, bias=False)
            turned = handsim.step_physics(turned, np.roll(targets, JOINTS_PER_FINGER, axis=1), params, self.model,
                                          disturbances=False, bias=False)
            np.testing.assert_allclose(turned.q, np.roll(state.q, JOINTS_PER_FINGER, axis=1), atol=1e-8)
            np.testing.assert_allclose(turned.center, handsim.rotate(state.center, np.pi / 2), atol=1e-10)
            np.testing.assert_allclose(turned.yaw, state.yaw + np.pi / 2, atol=1e-8)
            np.testing.assert_allclose(turned.ang_vel, state.ang_vel, atol=1e-7)

    def test_joint_limits_hold(self):
        state = self.free_state()
        params = PhysParams.nominal(4)
        targets = np.tile(self.model.upper + 1.0, (4, 1))
        for _ in range(5):
            state = handsim.step_physics(state, targets, params, self.model, disturbances=False)
            self.assertTrue(np.all(state.q <= self.model.upper) and np.all(state.q >= self.model.lower))

    def test_bias_force_pulls_free_object_down(self):
        q = np.zeros((1, NUM_JOINTS))
        state = SimState.at_rest(q, center=[[1.0, 1.0]])
        params = PhysParams.nominal(1)
        after = handsim.step_physics(state, q, params, self.model, disturbances=False)
        np.testing.assert_allclose(after.q, q, atol=1e-12)
        self.assertLess(after.lin_vel[0, 1], 0.0)
        self.assertAlmostEqual(after.lin_vel[0, 0], 0.0)

    def test_deterministic(self):
        state = self.free_state(seed=4)
        params = PhysParams.nominal(4)
        draws = np.random.default_rng(0).random((4, 2))
        first = handsim.step_physics(state, state.q, params, self.model, draws)
        second = handsim.step_physics(state, state.q, params, self.model, draws)
        np.testing.assert_array_equal(first.q, second.q)
        np.testing.assert_array_equal(first.center, second.center)

    def test_non_finite_env_is_frozen_and_flagged(self):
        state = self.free_state(n=2)
        params = PhysParams.nominal(2)
        targets = state.q.copy()
        targets[1, 0] = np.nan
        with self.assertLogs('rotation.handsim', level='WARNING'):
            after = handsim.step_physics(state, targets, params, self.model, disturbances=False)
        self.assertEqual(after.fault.tolist(), [False, True])
        np.testing.assert_array_equal(after.q[1], state.q[1])
        self.assertTrue(np.all(np.isfinite(after.q[0])))

    def test_mean_torque_recorded(self):
        state = self.free_state(n=1)
        params = PhysParams.nominal(1)
        after = handsim.step_physics(state, state.q + 0.05, params, self.model, disturbances=False)
        self.assertTrue(np.all(np.abs(after.torque) <= self.model.torque_limit))
        self.assertGreater(float(np.sum(np.abs(after.torque))), 0.0)
