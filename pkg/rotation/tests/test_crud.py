import struct
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from rotlab.utils import crud
from rotlab.utils.error_manage import ValidationError
from rotation import nets
from rotation.envgym import GraspCache
from rotation.models import PolicyVariant, RunManifest


class CrudTestCase(SimpleTestCase):

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()


class CheckpointTests(CrudTestCase):

    def test_tensors_keep_names_tags_and_values(self):
        tensors = [('policy.0.weight', 'dense:elu', np.arange(6, dtype=np.float32).reshape(2, 3)),
                   ('policy.0.bias', 'dense:elu', np.array([0.5, -0.25], dtype=np.float32))]
        path = crud.write_checkpoint(self.tmp / 'net.rlck', tensors)
        loaded = crud.read_checkpoint(path)
        self.assertEqual([(n, t) for n, t, _ in loaded], [(n, t) for n, t, _ in tensors])
        for (_, _, a), (_, _, b) in zip(tensors, loaded):
            np.testing.assert_array_equal(a, b)

    def test_bad_magic(self):
        path = self.tmp / 'bad.rlck'
        path.write_bytes(b'XXXX' + bytes(8))
        with self.assertRaises(ValidationError):
            crud.read_checkpoint(path)

    def test_truncated_file(self):
        path = crud.write_checkpoint(self.tmp / 'net.rlck', [('w', 'dense:relu', np.ones((4, 4)))])
        path.write_bytes(path.read_bytes()[:-8])
        with self.assertRaises(ValidationError):
            crud.read_checkpoint(path)


class BundleTests(CrudTestCase):

    def build(self):
        bundle = nets.build_bundle(PolicyVariant.RMA, np.random.default_rng(0))
        nets.build_adaptation(bundle, np.random.default_rng(1), 20)
        return bundle

    def test_save_and_load(self):
        bundle = self.build()
        manifest = crud.save_bundle(self.tmp / 'bundle', bundle)
        self.assertEqual(manifest['history_len'], 20)
        self.assertEqual(set(manifest['roles']), {'encoder', 'policy', 'critic', 'adaptation'})
        loaded = crud.load_bundle(self.tmp / 'bundle', require_adaptation=True)
        self.assertEqual(nets.bundle_hash(loaded), nets.bundle_hash(bundle))
        self.assertEqual(loaded.adaptation.lengths, [20, 9, 5, 1])
        history = np.random.default_rng(2).normal(size=(20, 32))
        np.testing.assert_array_equal(nets.adapt_estimate(loaded, history), nets.adapt_estimate(bundle, history))

    def test_tampered_parameters_rejected(self):
        crud.save_bundle(self.tmp / 'bundle', self.build())
        policy = self.tmp / 'bundle' / 'policy.rlck'
        data = policy.read_bytes()
        policy.write_bytes(data[:-4] + struct.pack('<f', 123.0))
        with self.assertRaises(ValidationError) as ctx:
            crud.load_bundle(self.tmp / 'bundle')
        self.assertEqual(ctx.exception.field, 'param_hash')

    def test_expert_without_adaptation(self):
        bundle = nets.build_bundle(PolicyVariant.SYSID, np.random.default_rng(0))
        manifest = crud.save_bundle(self.tmp / 'expert', bundle)
        self.assertNotIn('encoder', manifest['roles'])
        self.assertIsNone(manifest['history_len'])
        self.assertIs(crud.load_bundle(self.tmp / 'expert').variant, PolicyVariant.SYSID)
        with self.assertRaises(ValidationError) as ctx:
            crud.load_bundle(self.tmp / 'expert', require_adaptation=True)
        self.assertIn('adaptation', ctx.exception.details)


class GraspCacheTests(CrudTestCase):

    def test_cache_round_trip(self):
        rng = np.random.default_rng(0)
        cache = GraspCache(bucket_scales=np.array([0.7, 0.72, 0.74]), bucket_ids=np.array([0, 0, 2]),
                           q=rng.uniform(-0.5, 1.0, (3, 16)), pose=rng.uniform(-0.01, 0.01, (3, 3)))
        path = crud.write_grasp_cache(self.tmp / 'grasps.rlgc', cache)
        loaded = crud.read_grasp_cache(path)
        np.testing.assert_array_equal(loaded.bucket_scales, [0.7, 0.72, 0.74])
        np.testing.assert_array_equal(loaded.bucket_ids, [0, 0, 2])
        np.testing.assert_allclose(loaded.q, cache.q, rtol=1e-6)
        np.testing.assert_allclose(loaded.pose, cache.pose, rtol=1e-6)
        rows = crud.read_csv(crud.export_grasp_csv(self.tmp / 'grasps.csv', loaded))
        self.assertEqual(len(rows), 3)
        self.assertEqual(rows[2]['bucket'], '2')

    def test_missing_cache(self):
        with self.assertRaises(ValidationError) as ctx:
            crud.read_grasp_cache(self.tmp / 'none.rlgc')
        self.assertEqual(ctx.exception.field, 'grasps')


class TextArtifactTests(CrudTestCase):

    def test_action_sequence(self):
        actions = np.linspace(-1, 1, 32).reshape(2, 16)
        path = crud.write_action_sequence(self.tmp / 'periodic.csv', actions)
        np.testing.assert_allclose(crud.read_action_sequence(path), actions)

    def test_log_rows_append_under_one_header(self):
        path = self.tmp / 'log.csv'
        crud.append_csv_row(path, ['update', 'loss'], {'update': 1, 'loss': 0.5})
        crud.append_csv_row(path, ['update', 'loss'], {'update': 2})
        rows = crud.read_csv(path)
        self.assertEqual(rows, [{'update': '1', 'loss': '0.5'}, {'update': '2', 'loss': ''}])

    def test_manifest(self):
        manifest = RunManifest(command='eval', config={'episodes': 2}, seed=3, artifacts={'a': 'x.csv'})
        crud.write_manifest(self.tmp, manifest)
        payload = crud.read_json(self.tmp / 'manifest.json')
        self.assertEqual(payload['command'], 'eval')
        self.assertEqual(payload['seed'], 3)
        self.assertEqual(payload['config'], {'episodes': 2})
