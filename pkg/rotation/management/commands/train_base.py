from rotlab.utils.error_manage import handle_command_errors
from rotation.management.commands._base import LabCommand
from rotation.trainer import train_base


class Command(LabCommand):
    help = "Phase 1 : entraîne l'expert (politique, critique, encodeur) par PPO."
    sections = ('env', 'train')
    out_name = 'base'

    def add_lab_arguments(self, parser):
        parser.add_argument('--grasps', help="Cache de prises (défaut : RUNS_DIR/grasps/grasps.rlgc)")
        parser.add_argument('--variant', choices=['rma', 'sysid', 'dr'], help="Variante de l'expert")
        parser.add_argument('--obs-pairs', type=int, help="Paires (q, a) observées, variante dr seulement")
        parser.add_argument('--max-updates', type=int, help="Budget de mises à jour PPO")

    def config_flags(self, options):
        return {'variant': options.get('variant'), 'obs_pairs': options.get('obs_pairs'),
                'max_updates': options.get('max_updates')}

    @handle_command_errors()
    def handle(self, *args, **options):
        config = self.load_config(options)
        seed = self.seed(options)
        out = self.out_dir(options)
        cache, grasps = self.load_cache(options.get('grasps'), config)
        manifest = self.start(config, seed, {'grasps': grasps})
        bundle, rows = train_base(config, cache, seed=seed, out_dir=out, workers=self.workers(options))
        self.stdout.write(f"updates: {len(rows)}, last mean reward: {rows[-1]['mean_reward']:.4f}")
        self.finish(manifest, out, {'expert': out / 'expert', 'train_log': out / 'train_log.csv'})
