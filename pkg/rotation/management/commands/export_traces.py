from pathlib import Path

from rotlab.utils.error_manage import handle_command_errors
from rotation.evalsuite import VariantSpec, export_traces
from rotation.management.commands._base import LabCommand
from rotation.models import Distribution


class Command(LabCommand):
    help = "Exporte, pas par pas, les extrinsèques estimées et la vérité physique (avec échange d'objet)."
    sections = ('env', 'eval')
    out_name = 'traces'

    def add_lab_arguments(self, parser):
        parser.add_argument('--grasps', help="Cache de prises (défaut : RUNS_DIR/grasps/grasps.rlgc)")
        parser.add_argument('--bundle', required=True, help="Dossier du bundle avec module d'adaptation")
        parser.add_argument('--variant', default='ours', choices=['ours', 'sysid', 'noadapt'],
                            help="Estimateur utilisé pendant l'export")
        parser.add_argument('--dist', choices=[d.value for d in Distribution], default=Distribution.TRAIN.value)
        parser.add_argument('--episodes', type=int, help="Nombre d'épisodes exportés")
        parser.add_argument('--swap-every', type=int, help="Remplace l'objet tous les N pas (0 : jamais)")
        parser.add_argument('--trajectory', action='store_true',
                            help="Écrit aussi la trajectoire détaillée de l'environnement 0")

    def config_flags(self, options):
        return {'episodes': options.get('episodes'), 'swap_every': options.get('swap_every')}

    @handle_command_errors()
    def handle(self, *args, **options):
        config = self.load_config(options)
        seed = self.seed(options)
        out = self.out_dir(options)
        spec = VariantSpec.parse(options['variant'], options['bundle'])
        spec.check()
        cache, grasps = self.load_cache(options.get('grasps'), config)
        manifest = self.start(config, seed, {'grasps': grasps, 'bundle': Path(options['bundle']) / 'bundle.json'})
        artifacts = {'traces': out / 'traces.csv'}
        if options['trajectory']:
            artifacts['trajectory'] = out / 'trajectory.csv'
        _, rows = export_traces(spec, config, cache, config['episodes'], seed=seed,
                                swap_every=config['swap_every'], distribution=Distribution(options['dist']),
                                out_path=artifacts['traces'], workers=self.workers(options),
                                trajectory_path=artifacts.get('trajectory'))
        self.stdout.write(f"rows: {len(rows)}")
        self.finish(manifest, out, artifacts)
