import json
from pathlib import Path

from rotlab.utils import crud
from rotlab.utils.error_manage import ValidationError, handle_command_errors
from rotation.evalsuite import probe_extrinsics
from rotation.management.commands._base import LabCommand


class Command(LabCommand):
    help = "Sonde linéaire des traces d'extrinsèques vers la masse et l'échelle ; corrélation masse / couple."
    sections = ()
    out_name = 'probe'

    def add_lab_arguments(self, parser):
        parser.add_argument('--traces', required=True, help="CSV écrit par export_traces")
        parser.add_argument('--folds', type=int, default=5, help="Plis de la validation croisée")
        parser.add_argument('--min-groups', type=int, default=20, help="Tirages de paramètres minimum")

    @handle_command_errors()
    def handle(self, *args, **options):
        config = self.load_config(options)
        seed = self.seed(options)
        out = self.out_dir(options)
        traces = Path(options['traces'])
        rows = crud.read_csv(traces)
        if not rows:
            raise ValidationError(f"No trace rows in {traces}", field='traces')
        columns = list(rows[0])
        width = len([c for c in columns if c[0] in 'ez' and c[1:].isdigit()])
        manifest = self.start(config, seed, {'traces': traces})
        result = probe_extrinsics([[row[c] for c in columns] for row in rows], width, seed=seed,
                                  folds=options['folds'], min_groups=options['min_groups'])
        path = crud.write_json(out / 'probe.json', result)
        self.stdout.write(json.dumps(result, indent=2))
        self.finish(manifest, out, {'probe': path})
