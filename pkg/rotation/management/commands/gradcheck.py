from rotlab.utils import crud
from rotlab.utils.error_manage import AcceptanceFailure, handle_command_errors
from rotation.management.commands._base import LabCommand
from rotation.numkit import gradcheck_suite

THRESHOLD = 1e-4


class Command(LabCommand):
    help = "Compare les gradients analytiques aux différences finies centrées (float64)."
    sections = ()
    out_name = 'gradcheck'

    def add_lab_arguments(self, parser):
        parser.add_argument('--cases', type=int, default=100, help="Cas aléatoires par type de couche")

    @handle_command_errors()
    def handle(self, *args, **options):
        config = self.load_config(options)
        seed = self.seed(options)
        out = self.out_dir(options)
        manifest = self.start(config, seed)
        worst = gradcheck_suite(cases=options['cases'], seed=seed)
        for key, error in sorted(worst.items()):
            self.stdout.write(f"{key}: {error:.3e}")
        max_error = max(worst.values())
        self.stdout.write(f"max relative error: {max_error:.3e}")
        path = crud.write_json(out / 'gradcheck.json', {'threshold': THRESHOLD, 'max': max_error, **worst})
        self.finish(manifest, out, {'gradcheck': path})
        if not max_error < THRESHOLD:
            raise AcceptanceFailure(f"Gradient check failed: {max_error:.3e} >= {THRESHOLD:.0e}",
                                    details=worst)
