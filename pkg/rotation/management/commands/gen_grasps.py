import numpy as np

from rotlab.utils import crud
from rotlab.utils.error_manage import handle_command_errors
from rotation.envgym import EnvConfig, generate_grasps, scale_buckets, verify_grasps
from rotation.management.commands._base import LabCommand


class Command(LabCommand):
    help = "Pré-échantillonne les prises initiales stables pour chaque seau d'échelle."
    out_name = 'grasps'

    def add_lab_arguments(self, parser):
        parser.add_argument('--per-bucket', type=int, help="Prises par seau (clé grasps_per_bucket)")
        parser.add_argument('--verify', type=int, default=0,
                            help="Re-simule les N premières prises et rapporte la fraction acceptée")

    def config_flags(self, options):
        return {'grasps_per_bucket': options.get('per_bucket')}

    @handle_command_errors()
    def handle(self, *args, **options):
        config = self.load_config(options)
        seed = self.seed(options)
        out = self.out_dir(options)
        manifest = self.start(config, seed)
        env_config = EnvConfig.from_config(config, seed=seed)
        lo = min(config['train_ranges']['scale'][0], config['test_ranges']['scale'][0])
        hi = max(config['train_ranges']['scale'][1], config['test_ranges']['scale'][1])
        buckets = scale_buckets(lo, hi, config['scale_bucket_step'])
        cache = generate_grasps(env_config, config['grasps_per_bucket'], np.random.default_rng(seed),
                                buckets=buckets)
        artifacts = {'grasps': crud.write_grasp_cache(out / 'grasps.rlgc', cache),
                     'grasps_csv': crud.export_grasp_csv(out / 'grasps.csv', cache)}
        if options['verify']:
            fraction = verify_grasps(cache, env_config, limit=options['verify'])
            self.stdout.write(f"verified: {fraction:.3f} of {min(options['verify'], len(cache))} grasps still stable")
        self.finish(manifest, out, artifacts)
