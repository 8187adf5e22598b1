from pathlib import Path

from rotlab.utils import crud
from rotlab.utils.error_manage import handle_command_errors
from rotation.evalsuite import make_periodic
from rotation.management.commands._base import LabCommand


class Command(LabCommand):
    help = "Enregistre la séquence d'actions de référence (base en boucle ouverte)."
    sections = ('env', 'eval')
    out_name = 'periodic'

    def add_lab_arguments(self, parser):
        parser.add_argument('--grasps', help="Cache de prises (défaut : RUNS_DIR/grasps/grasps.rlgc)")
        parser.add_argument('--expert', required=True, help="Dossier du bundle expert")

    @handle_command_errors()
    def handle(self, *args, **options):
        config = self.load_config(options)
        seed = self.seed(options)
        out = self.out_dir(options)
        cache, grasps = self.load_cache(options.get('grasps'), config)
        expert = Path(options['expert'])
        bundle = crud.load_bundle(expert)
        manifest = self.start(config, seed, {'grasps': grasps, 'expert': expert / 'bundle.json'})
        actions, used = make_periodic(bundle, config, cache, seed=seed, retries=config['periodic_retries'])
        path = crud.write_action_sequence(out / 'periodic.csv', actions)
        manifest.seed = used
        self.finish(manifest, out, {'periodic': path})
