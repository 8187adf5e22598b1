from pathlib import Path

from rotlab.utils.error_manage import handle_command_errors
from rotation.evalsuite import METRICS, VariantSpec, evaluate
from rotation.management.commands._base import LabCommand
from rotation.models import Distribution


def artifact_inputs(spec):
    """Fichiers lus par la variante, pour l'empreinte du manifeste."""
    inputs = {}
    if spec.bundle_dir:
        inputs['bundle'] = Path(spec.bundle_dir) / 'bundle.json'
    if spec.periodic_path:
        inputs['periodic'] = Path(spec.periodic_path)
    return inputs


class Command(LabCommand):
    help = "Évalue une variante (expert, ours, sysid, noadapt, periodic, dr_mlp_T<k>) sur train ou ood."
    sections = ('env', 'eval')
    out_name = 'eval'

    def add_lab_arguments(self, parser):
        parser.add_argument('--grasps', help="Cache de prises (défaut : RUNS_DIR/grasps/grasps.rlgc)")
        parser.add_argument('--variant', required=True, help="Variante évaluée")
        parser.add_argument('--dist', choices=[d.value for d in Distribution], default=Distribution.TRAIN.value,
                            help="Distribution des paramètres physiques")
        parser.add_argument('--bundle', help="Dossier du bundle (toutes les variantes sauf periodic)")
        parser.add_argument('--periodic', help="Séquence d'actions CSV (variante periodic)")
        parser.add_argument('--episodes', type=int, help="Épisodes par graine")

    def config_flags(self, options):
        flags = {'episodes': options.get('episodes')}
        if options.get('seed') is not None:
            flags['seeds'] = [options['seed']]
        return flags

    @handle_command_errors()
    def handle(self, *args, **options):
        config = self.load_config(options)
        out = self.out_dir(options)
        spec = VariantSpec.parse(options['variant'], options.get('bundle'), options.get('periodic'))
        spec.check()
        cache, grasps = self.load_cache(options.get('grasps'), config)
        manifest = self.start(config, config['seeds'][0], {'grasps': grasps, **artifact_inputs(spec)})
        distribution = Distribution(options['dist'])
        table, _ = evaluate(spec, config, cache, distribution, config['episodes'], config['seeds'],
                            out_dir=out, workers=self.workers(options))
        for metric in METRICS:
            stats = table[metric]
            self.stdout.write(f"{metric}: {stats['mean']:.4f} ± {stats['std']:.4f}")
        suffix = f'{spec.label}_{distribution.value}'
        self.finish(manifest, out, {'episodes': out / f'episodes_{suffix}.csv',
                                    'aggregate': out / f'aggregate_{suffix}.csv'})
