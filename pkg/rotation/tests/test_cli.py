import copy
import csv
import json
import tempfile
from io import StringIO
from pathlib import Path

from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from rotlab.utils import crud
from rotation import cli


def tiny_config():
    """Une seule échelle d'objet, quelques environnements, deux mises à jour."""
    train = copy.deepcopy(settings.TRAIN_RANGES)
    test = copy.deepcopy(settings.TEST_RANGES)
    train['scale'] = [0.78, 0.78]
    test['scale'] = [0.78, 0.78]
    return {
        'num_envs': 4, 'episode_len': 40, 'history_len': 30,
        'train_ranges': train, 'test_ranges': test,
        'max_updates': 2, 'horizon': 4, 'epochs': 2, 'minibatches': 2,
        'checkpoint_every': 1, 'eval_every': 1,
        'grasps_per_bucket': 4,
        'adapt_iterations': 2, 'adapt_horizon': 35, 'adapt_batch': 64,
        'episodes': 2, 'seeds': [0],
    }


class DispatchTests(SimpleTestCase):

    def test_hyphenated_names(self):
        self.assertEqual(cli.resolve('train-base'), 'train_base')
        self.assertEqual(cli.resolve('gradcheck'), 'gradcheck')
        self.assertEqual(cli.resolve('test'), 'test')
        self.assertIsNone(cli.resolve('bogus'))

    def test_unknown_subcommand(self):
        self.assertEqual(cli.dispatch(['bogus']), 2)

    def test_configuration_error_exit_code(self):
        with tempfile.TemporaryDirectory() as tmp:
            code = cli.dispatch(['probe', '--traces', str(Path(tmp) / 'absent.csv'), '--out', tmp])
        self.assertEqual(code, 2)

    def test_input_hash_follows_content(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'in.txt'
            path.write_text('a', encoding='utf-8')
            first = cli.input_hash({'k': 1}, {'in': path})
            self.assertEqual(first, cli.input_hash({'k': 1}, {'in': path}))
            self.assertNotEqual(first, cli.input_hash({'k': 2}, {'in': path}))
            path.write_text('b', encoding='utf-8')
            self.assertNotEqual(first, cli.input_hash({'k': 1}, {'in': path}))


class CommandTests(SimpleTestCase):

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self.config = self.tmp / 'tiny.json'
        self.config.write_text(json.dumps(tiny_config()), encoding='utf-8')

    def tearDown(self):
        self._tmp.cleanup()

    def run_command(self, name, **options):
        out = StringIO()
        call_command(name, stdout=out, **options)
        return out.getvalue()

    def test_gradcheck(self):
        output = self.run_command('gradcheck', cases=2, out=str(self.tmp / 'gc'))
        self.assertIn('max relative error', output)
        result = crud.read_json(self.tmp / 'gc' / 'gradcheck.json')
        self.assertLess(result['max'], result['threshold'])
        manifest = crud.read_json(self.tmp / 'gc' / 'manifest.json')
        self.assertEqual(manifest['command'], 'gradcheck')
        self.assertEqual(manifest['tool_version'], settings.ROTLAB_VERSION)

    def test_missing_grasp_cache(self):
        with self.assertRaises(CommandError) as ctx:
            self.run_command('train_base', config=str(self.config), grasps=str(self.tmp / 'none.rlgc'),
                             out=str(self.tmp / 'base'))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_invalid_configuration(self):
        self.config.write_text(json.dumps({**tiny_config(), 'r_min': 1.0}), encoding='utf-8')
        with self.assertRaises(CommandError) as ctx:
            self.run_command('gen_grasps', config=str(self.config), out=str(self.tmp / 'grasps'))
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertIn('r_min', str(ctx.exception))

    def test_pipeline(self):
        common = {'config': str(self.config), 'profile': 'smoke'}
        self.run_command('gen_grasps', out=str(self.tmp / 'grasps'), **common)
        grasps = self.tmp / 'grasps' / 'grasps.rlgc'
        cache = crud.read_grasp_cache(grasps)
        self.assertEqual(len(cache.bucket_scales), 1)
        self.assertGreater(len(cache), 0)

        output = self.run_command('train_base', grasps=str(grasps), out=str(self.tmp / 'base'), **common)
        self.assertIn('updates: 2', output)
        self.assertTrue((self.tmp / 'base' / 'expert' / 'bundle.json').exists())
        self.assertTrue((self.tmp / 'base' / 'checkpoints' / 'update_00002' / 'policy.rlck').exists())
        self.assertEqual(len(crud.read_csv(self.tmp / 'base' / 'train_log.csv')), 2)

        self.run_command('train_adapt', grasps=str(grasps), expert=str(self.tmp / 'base' / 'expert'),
                         out=str(self.tmp / 'adapt'), **common)
        bundle = crud.load_bundle(self.tmp / 'adapt' / 'bundle', require_adaptation=True)
        self.assertEqual(bundle.history_len, 30)

        output = self.run_command('eval', grasps=str(grasps), variant='ours', bundle=str(self.tmp / 'adapt' / 'bundle'),
                                  out=str(self.tmp / 'eval'), **common)
        self.assertIn('rotr:', output)
        with open(self.tmp / 'eval' / 'aggregate_ours_train.csv', newline='', encoding='utf-8') as handle:
            metrics = [row['metric'] for row in csv.DictReader(handle)]
        self.assertEqual(metrics, ['ttf', 'rotr', 'rotations', 'objvel', 'torque'])
        episodes = crud.read_csv(self.tmp / 'eval' / 'episodes_ours_train.csv')
        self.assertEqual(len(episodes), 2)
        manifest = crud.read_json(self.tmp / 'eval' / 'manifest.json')
        self.assertEqual(manifest['command'], 'eval')
        self.assertEqual(manifest['config']['episodes'], 2)
        self.assertIn('grasps', manifest['inputs'])

        self.run_command('record_periodic', grasps=str(grasps), expert=str(self.tmp / 'base' / 'expert'),
                         out=str(self.tmp / 'periodic'), **common)
        actions = crud.read_action_sequence(self.tmp / 'periodic' / 'periodic.csv')
        self.assertEqual(actions.shape, (40, 16))
        manifest = crud.read_json(self.tmp / 'periodic' / 'manifest.json')
        self.assertEqual(manifest['command'], 'record_periodic')
        output = self.run_command('eval', grasps=str(grasps), variant='periodic',
                                  periodic=str(self.tmp / 'periodic' / 'periodic.csv'),
                                  out=str(self.tmp / 'eval_periodic'), **common)
        self.assertIn('rotr:', output)

        output = self.run_command('export_traces', grasps=str(grasps), bundle=str(self.tmp / 'adapt' / 'bundle'),
                                  swap_every=10, out=str(self.tmp / 'traces'), **common)
        self.assertIn('rows:', output)
        traces = crud.read_csv(self.tmp / 'traces' / 'traces.csv')
        self.assertTrue(traces)
        for row in traces:
            self.assertEqual(int(row['segment']), int(row['t']) // 10)
        self.assertEqual(crud.read_json(self.tmp / 'traces' / 'manifest.json')['config']['swap_every'], 10)

        self.run_command('probe', traces=str(self.tmp / 'traces' / 'traces.csv'), min_groups=2, folds=2,
                         out=str(self.tmp / 'probe'))
        result = crud.read_json(self.tmp / 'probe' / 'probe.json')
        self.assertGreaterEqual(result['groups'], 2)
        self.assertIn('mass_r2', result)
        self.assertIn('torque_mass_spearman', result)
