import math

import numpy as np
from django.test import SimpleTestCase

from rotlab.utils.error_manage import UsageError, ValidationError
from rotation import nets
from rotation.models import PolicyVariant
from rotation.numkit import CHECK_DTYPE, check_gradients, dense_backward, dense_forward


class BundleTests(SimpleTestCase):

    def setUp(self):
        self.bundle = nets.build_bundle(PolicyVariant.RMA, np.random.default_rng(0))

    def test_widths(self):
        self.assertEqual(self.bundle.obs_width, 96)
        self.assertEqual(self.bundle.z_width, 8)
        self.assertEqual(self.bundle.policy.in_width, 104)
        self.assertEqual(self.bundle.policy.out_width, 16)
        self.assertEqual(nets.build_bundle(PolicyVariant.SYSID, np.random.default_rng(0)).z_width, 9)
        dr = nets.build_bundle(PolicyVariant.DR, np.random.default_rng(0), obs_pairs=5)
        self.assertEqual(dr.policy.in_width, 160)

    def test_only_dr_accepts_longer_windows(self):
        with self.assertRaises(ValidationError):
            nets.build_bundle(PolicyVariant.RMA, np.random.default_rng(0), obs_pairs=5)

    def test_same_seed_same_parameters(self):
        other = nets.build_bundle(PolicyVariant.RMA, np.random.default_rng(0))
        self.assertEqual(nets.bundle_hash(self.bundle), nets.bundle_hash(other))

    def test_rest_pose_is_output_bias(self):
        pose = np.linspace(-0.5, 0.5, 16)
        bundle = nets.build_bundle(PolicyVariant.RMA, np.random.default_rng(0), rest_pose=pose)
        np.testing.assert_allclose(bundle.policy.layers[-1].bias, pose, rtol=1e-6)


class EncoderTests(SimpleTestCase):

    def setUp(self):
        self.bundle = nets.build_bundle(PolicyVariant.RMA, np.random.default_rng(1))

    def test_encoding_is_deterministic_and_bounded(self):
        e = np.random.default_rng(2).uniform(-1.5, 1.5, (5, 9))
        z1 = nets.encode_extrinsics(self.bundle, e)
        z2 = nets.encode_extrinsics(self.bundle, e)
        np.testing.assert_array_equal(z1, z2)
        self.assertEqual(z1.shape, (5, 8))
        self.assertTrue(np.all(np.abs(z1) <= 1.0))

    def test_zero_input_matches_forward(self):
        z = nets.encode_extrinsics(self.bundle, np.zeros(9))
        expected, _ = dense_forward(self.bundle.encoder, np.zeros(9))
        np.testing.assert_array_equal(z, expected)

    def test_wrong_width(self):
        with self.assertRaises(ValidationError):
            nets.encode_extrinsics(self.bundle, np.zeros(8))

    def test_sysid_is_identity(self):
        bundle = nets.build_bundle(PolicyVariant.SYSID, np.random.default_rng(0))
        e = np.linspace(-1, 1, 9)
        np.testing.assert_allclose(nets.encode_extrinsics(bundle, e), e, rtol=1e-6)


class PolicyTests(SimpleTestCase):

    def setUp(self):
        self.bundle = nets.build_bundle(PolicyVariant.RMA, np.random.default_rng(3))
        rng = np.random.default_rng(4)
        self.obs = rng.normal(size=(2, 96))
        self.z = rng.uniform(-1, 1, (2, 8))

    def test_mean_mode_is_deterministic(self):
        a1, _ = nets.policy_act(self.bundle, self.obs, self.z)
        a2, _ = nets.policy_act(self.bundle, self.obs, self.z)
        np.testing.assert_array_equal(a1, a2)

    def test_log_prob_of_mean(self):
        _, logp = nets.policy_act(self.bundle, self.obs, self.z)
        expected = float(np.sum(-self.bundle.log_std.astype(np.float64) - 0.5 * math.log(2 * math.pi)))
        np.testing.assert_allclose(logp, expected, rtol=1e-5)

    def test_sample_spread_matches_std(self):
        obs = np.repeat(self.obs[:1], 20000, axis=0)
        z = np.repeat(self.z[:1], 20000, axis=0)
        actions, _ = nets.policy_act(self.bundle, obs, z, mode='sample', rng=np.random.default_rng(5))
        std = np.std(actions, axis=0)
        np.testing.assert_allclose(std, np.exp(self.bundle.log_std), rtol=0.03)

    def test_sampling_needs_randomness(self):
        with self.assertRaises(UsageError):
            nets.policy_act(self.bundle, self.obs, self.z, mode='sample')

    def test_critic_starts_at_zero(self):
        np.testing.assert_array_equal(nets.critic_value(self.bundle, self.obs, self.z), 0.0)

    def test_critic_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        critic = self.bundle.critic.astype(CHECK_DTYPE)
        for layer in critic.layers:
            layer.weight[:] = rng.normal(0.0, 0.1, layer.weight.shape)
        x = nets.policy_input(self.bundle, self.obs, self.z).astype(CHECK_DTYPE)

        def loss():
            return float(np.sum(dense_forward(critic, x)[0]))

        _, cache = dense_forward(critic, x)
        grads, _ = dense_backward(critic, cache, np.ones((2, 1)))
        self.assertLess(check_gradients(loss, critic.parameters(), grads, rng, per_tensor=4), 1e-4)

    def test_observation_width_checked(self):
        with self.assertRaises(ValidationError):
            nets.policy_act(self.bundle, np.zeros((2, 64)), self.z)


class AdaptationTests(SimpleTestCase):

    def setUp(self):
        self.bundle = nets.build_bundle(PolicyVariant.RMA, np.random.default_rng(7))
        nets.build_adaptation(self.bundle, np.random.default_rng(8), 30)

    def test_temporal_lengths(self):
        self.assertEqual(self.bundle.adaptation.lengths, [30, 11, 7, 3])
        self.assertEqual(self.bundle.history_len, 30)

    def test_shorter_histories_have_valid_stacks(self):
        for length, expected in ((20, [20, 9, 5, 1]), (10, [10, 9, 5, 1])):
            bundle = nets.build_bundle(PolicyVariant.RMA, np.random.default_rng(0))
            nets.build_adaptation(bundle, np.random.default_rng(0), length)
            self.assertEqual(bundle.adaptation.lengths, expected)

    def test_estimate_is_deterministic_and_order_sensitive(self):
        history = np.random.default_rng(9).normal(size=(30, 32))
        z1 = nets.adapt_estimate(self.bundle, history)
        z2 = nets.adapt_estimate(self.bundle, history)
        np.testing.assert_array_equal(z1, z2)
        swapped = history.copy()
        swapped[[3, 20]] = history[[20, 3]]
        self.assertFalse(np.allclose(nets.adapt_estimate(self.bundle, swapped), z1))

    def test_dr_has_no_adaptation(self):
        bundle = nets.build_bundle(PolicyVariant.DR, np.random.default_rng(0))
        with self.assertRaises(UsageError):
            nets.build_adaptation(bundle, np.random.default_rng(0), 30)

    def test_sysid_head_is_linear(self):
        bundle = nets.build_bundle(PolicyVariant.SYSID, np.random.default_rng(0))
        stack = nets.build_adaptation(bundle, np.random.default_rng(0), 30)
        self.assertEqual(stack.out_width, 9)
        self.assertEqual(stack.projection.layers[-1].activation.value, 'identity')
