from pathlib import Path

from rotlab.utils import crud
from rotlab.utils.error_manage import handle_command_errors
from rotation.management.commands._base import LabCommand
from rotation.trainer import train_adaptation


class Command(LabCommand):
    help = "Phase 2 : entraîne le module d'adaptation sur les trajectoires de l'expert figé."
    sections = ('env', 'adapt')
    out_name = 'adapt'

    def add_lab_arguments(self, parser):
        parser.add_argument('--grasps', help="Cache de prises (défaut : RUNS_DIR/grasps/grasps.rlgc)")
        parser.add_argument('--expert', required=True, help="Dossier du bundle expert (train_base)")
        parser.add_argument('--history-len', type=int, choices=[10, 20, 30], help="Longueur T de l'historique")

    def config_flags(self, options):
        return {'history_len': options.get('history_len')}

    @handle_command_errors()
    def handle(self, *args, **options):
        config = self.load_config(options)
        seed = self.seed(options)
        out = self.out_dir(options)
        cache, grasps = self.load_cache(options.get('grasps'), config)
        expert = Path(options['expert'])
        bundle = crud.load_bundle(expert)
        manifest = self.start(config, seed, {'grasps': grasps, 'expert': expert / 'bundle.json'})
        _, rows = train_adaptation(config, bundle, cache, seed=seed, out_dir=out, workers=self.workers(options))
        last = rows[-1]
        self.stdout.write(f"iterations: {len(rows)}, holdout mse: {last['holdout_mse']:.5f}, "
                          f"z variance: {last['z_variance']:.5f}")
        self.finish(manifest, out, {'bundle': out / 'bundle', 'adapt_log': out / 'adapt_log.csv'})
