import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from rotlab.utils import crud
from rotlab.utils.error_manage import ValidationError
from rotlab.utils.extract_data import extract_config
from rotation import nets, trainer
from rotation.envgym import EnvConfig, RotationEnv
from rotation.evalsuite import (
    AdaptiveController, EpisodeTrace, PeriodicController, PrivilegedController, VariantSpec, aggregate,
    compute_metrics, export_traces, make_periodic, probe_extrinsics, trace_columns,
)
from rotation.models import DoneCause, PolicyVariant, VariantTag
from rotation.tests.helpers import canonical_cache


def steady_trace(steps=400, omega=1.0, dt=0.05, torque=1.2):
    trace = EpisodeTrace()
    for _ in range(steps):
        trace.append(omega, 0.0, torque, omega * dt)
    return trace


class MetricTests(SimpleTestCase):

    def test_steady_rotation(self):
        metrics = compute_metrics(steady_trace(), episode_len=400)
        self.assertAlmostEqual(metrics.ttf, 1.0)
        self.assertAlmostEqual(metrics.rotr, 400.0)
        self.assertAlmostEqual(metrics.rotations, 20.0, places=9)
        self.assertAlmostEqual(metrics.torque, 1.2)
        self.assertEqual(metrics.objvel, 0.0)

    def test_early_drop_shortens_ttf(self):
        metrics = compute_metrics(steady_trace(steps=100), episode_len=400)
        self.assertAlmostEqual(metrics.ttf, 0.25)

    def test_linear_speed_reported_in_centimetres(self):
        trace = EpisodeTrace()
        trace.append(0.0, 0.02, 0.0, 0.0)
        self.assertAlmostEqual(compute_metrics(trace, 10).objvel, 2.0)

    def test_empty_episode_rejected(self):
        with self.assertRaises(ValidationError):
            compute_metrics(EpisodeTrace(), 400)


class AggregateTests(SimpleTestCase):

    def row(self, seed, value, cause=DoneCause.TIMEOUT.value):
        return {'seed': seed, 'cause': cause, 'ttf': value, 'rotr': value, 'rotations': value,
                'objvel': value, 'torque': value}

    def test_mean_of_seed_means(self):
        rows = [self.row(0, 1.0), self.row(0, 3.0), self.row(1, 4.0)]
        table = aggregate(rows)
        self.assertAlmostEqual(table['rotr']['mean'], 3.0)
        self.assertAlmostEqual(table['rotr']['std'], 1.0)
        self.assertEqual(table['rotr']['seeds'], 2)
        self.assertEqual(table['rotr']['episodes'], 3)

    def test_faulted_episodes_excluded(self):
        rows = [self.row(0, 1.0), self.row(0, 100.0, cause=DoneCause.FAULT.value)]
        table = aggregate(rows)
        self.assertAlmostEqual(table['ttf']['mean'], 1.0)
        self.assertEqual(table['ttf']['episodes'], 1)


class VariantSpecTests(SimpleTestCase):

    def test_parse_labels(self):
        spec = VariantSpec.parse('dr_mlp_T5')
        self.assertIs(spec.tag, VariantTag.DR_MLP)
        self.assertEqual(spec.obs_pairs, 5)
        self.assertEqual(spec.label, 'dr_mlp_T5')
        self.assertIs(VariantSpec.parse('noadapt').tag, VariantTag.NOADAPT)

    def test_unknown_label(self):
        with self.assertRaises(ValidationError):
            VariantSpec.parse('oracle')

    def test_missing_artifacts(self):
        with self.assertRaises(ValidationError) as ctx:
            VariantSpec.parse('periodic').check()
        self.assertEqual(ctx.exception.details, {'periodic': 'required'})
        with self.assertRaises(ValidationError) as ctx:
            VariantSpec.parse('ours', bundle_dir='/nonexistent/bundle').check()
        self.assertIn('bundle', ctx.exception.details)


class FakeEnv:
    def __init__(self, steps):
        self.steps = np.asarray(steps)


class PeriodicControllerTests(SimpleTestCase):

    def test_replays_and_wraps(self):
        actions = np.arange(3 * 16, dtype=float).reshape(3, 16)
        controller = PeriodicController(actions)
        chosen, z = controller.act(FakeEnv([0, 1, 2, 3, 7]), obs=None)
        np.testing.assert_array_equal(chosen, actions[[0, 1, 2, 0, 1]])
        self.assertIsNone(z)

    def test_ignores_observations(self):
        controller = PeriodicController(np.ones((4, 16)))
        a, _ = controller.act(FakeEnv([2]), obs=np.zeros((1, 96)))
        b, _ = controller.act(FakeEnv([2]), obs=np.full((1, 96), 9.0))
        np.testing.assert_array_equal(a, b)


class ProbeTests(SimpleTestCase):

    def rows(self, groups=40, width=8, seed=0):
        """Traces synthétiques : z dépend linéairement de la masse et de l'échelle, plus un bruit faible."""
        rng = np.random.default_rng(seed)
        basis = rng.normal(size=(2, width))
        rows = []
        for episode in range(groups):
            mass, scale = rng.uniform(0.01, 0.25), rng.uniform(0.7, 0.86)
            torque = 2.0 * mass + 0.1
            for t in range(5):
                z = mass * basis[0] + scale * basis[1] + rng.normal(0.0, 1e-4, width)
                rows.append([episode, 0, t] + z.tolist() + [mass, scale, 1.0, 3, torque + 1e-3 * t])
        return rows

    def test_columns(self):
        self.assertEqual(trace_columns(2, 'z'), ['episode', 'segment', 't', 'z0', 'z1', 'mass', 'scale',
                                                 'friction', 'contacts', 'torque_l1'])

    def test_linear_extrinsics_are_recovered(self):
        result = probe_extrinsics(self.rows(), width=8)
        self.assertEqual(result['groups'], 40)
        self.assertGreater(result['mass_r2'], 0.99)
        self.assertGreater(result['scale_r2'], 0.99)
        self.assertLess(result['mass_r2_shuffled'], 0.5)
        self.assertGreater(result['torque_mass_spearman'], 0.99)

    def test_too_few_draws(self):
        with self.assertRaises(ValidationError):
            probe_extrinsics(self.rows(groups=5), width=8)


class ControllerRunTests(SimpleTestCase):

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self.config = extract_config('smoke', flags={'num_envs': 2, 'episode_len': 50, 'history_len': 30,
                                                     'episodes': 2}, environ={})
        self.cache = canonical_cache(EnvConfig.from_config(self.config))
        rng = np.random.default_rng(0)
        self.bundle = nets.build_bundle(PolicyVariant.RMA, rng, rest_pose=trainer.rest_pose(self.config))
        nets.build_adaptation(self.bundle, rng, 30)
        crud.save_bundle(self.tmp / 'bundle', self.bundle)

    def tearDown(self):
        self._tmp.cleanup()

    def held_env(self):
        config = EnvConfig.from_config(self.config, drop_patience=1000, c_max_train=1.0)
        env = RotationEnv(config, self.cache, disturbances=False)
        return env, env.reset()

    def test_frozen_estimate_matches_live_one_over_first_window(self):
        live_env, live_obs = self.held_env()
        frozen_env, frozen_obs = self.held_env()
        live, frozen = AdaptiveController(self.bundle), AdaptiveController(self.bundle, freeze=True)
        window = self.bundle.history_len
        captured = None
        for step in range(window + 8):
            live_actions, live_z = live.act(live_env, live_obs)
            frozen_actions, frozen_z = frozen.act(frozen_env, frozen_obs)
            if step <= window:
                np.testing.assert_array_equal(live_actions, frozen_actions)
                np.testing.assert_array_equal(live_z, frozen_z)
                captured = frozen_z.copy()
            else:
                np.testing.assert_array_equal(frozen_z, captured)
            live_obs, _, _, _ = live_env.step(live_actions)
            frozen_obs, _, _, _ = frozen_env.step(frozen_actions)

    def test_recorded_sequence_replays_the_expert_episode(self):
        actions, used = make_periodic(self.bundle, self.config, self.cache, seed=0, retries=3)
        self.assertEqual(actions.shape, (self.config['episode_len'], 16))
        self.assertIn(used, (0, 1, 2))
        env_config = EnvConfig.from_config(self.config, seed=used, num_envs=1, randomize=False)
        expert_env = RotationEnv(env_config, self.cache, auto_reset=False, disturbances=False)
        replay_env = RotationEnv(env_config, self.cache, auto_reset=False, disturbances=False)
        expert, replay = PrivilegedController(self.bundle), PeriodicController(actions)
        expert_obs, replay_obs = expert_env.reset(), replay_env.reset()
        for t in range(len(actions)):
            expert_action, _ = expert.act(expert_env, expert_obs)
            replay_action, _ = replay.act(replay_env, replay_obs)
            np.testing.assert_array_equal(replay_action[0], actions[t])
            np.testing.assert_array_equal(expert_action, replay_action)
            expert_obs, _, _, _ = expert_env.step(expert_action)
            replay_obs, _, _, _ = replay_env.step(replay_action)
            np.testing.assert_array_equal(expert_env.state.center, replay_env.state.center)

    def export(self, swap_every):
        spec = VariantSpec.parse('ours', bundle_dir=self.tmp / 'bundle')
        return export_traces(spec, self.config, self.cache, episodes=2, seed=1, swap_every=swap_every,
                             bundle=self.bundle)

    def test_swapped_object_opens_new_segment(self):
        columns, rows = self.export(swap_every=10)
        self.assertEqual(columns, trace_columns(8, 'z'))
        self.assertTrue(rows)
        for row in rows:
            self.assertEqual(row[1], row[2] // 10)
        scale_column = columns.index('scale')
        by_episode = {}
        for row in rows:
            by_episode.setdefault(row[0], set()).add(row[scale_column])
        self.assertTrue(all(len(scales) == 1 for scales in by_episode.values()))

    def test_export_is_deterministic(self):
        _, first = self.export(swap_every=10)
        _, second = self.export(swap_every=10)
        self.assertEqual(first, second)

    def test_export_needs_an_estimator(self):
        spec = VariantSpec.parse('expert', bundle_dir=self.tmp / 'bundle')
        with self.assertRaises(ValidationError):
            export_traces(spec, self.config, self.cache, episodes=2, bundle=self.bundle)
