from pathlib import Path

import numpy as np
from django.conf import settings
from django.core.management.base import BaseCommand

from rotlab.utils import crud
from rotlab.utils.error_manage import UsageError
from rotlab.utils.extract_data import extract_config, validate_config
from rotation import cli
from rotation.envgym import scale_buckets

CONFIG_HELP = (f"Configuration: defaults < --profile < --config JSON < {settings.CONFIG_ENV_PREFIX}<KEY> "
               "environment < flags. See README.md, section Configuration.")


class LabCommand(BaseCommand):
    """Commande du laboratoire : options communes, configuration validée, manifeste d'exécution."""

    sections = ('env',)
    out_name = None

    def add_arguments(self, parser):
        parser.add_argument('--config', help="Document JSON de configuration (objet à plat)")
        parser.add_argument('--profile', choices=sorted(settings.ROTLAB_PROFILES),
                            help=f"Profil de configuration (défaut : {settings.DEFAULT_PROFILE})")
        parser.add_argument('--seed', type=int, help=f"Graine (défaut : {settings.DEFAULT_SEED})")
        parser.add_argument('--workers', type=int, default=settings.DEFAULT_WORKERS,
                            help="Threads de simulation ; les résultats n'en dépendent pas")
        parser.add_argument('--out', help="Dossier de sortie (défaut : RUNS_DIR/<commande>)")
        self.add_lab_arguments(parser)

    def add_lab_arguments(self, parser):
        pass

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        parser.epilog = CONFIG_HELP
        return parser

    def config_flags(self, options):
        """Options explicites qui surchargent des clés de configuration."""
        return {}

    def load_config(self, options):
        config = extract_config(options.get('profile'), options.get('config'), self.config_flags(options))
        return validate_config(config, self.sections)

    def seed(self, options):
        return settings.DEFAULT_SEED if options.get('seed') is None else options['seed']

    def workers(self, options):
        workers = options.get('workers') or 1
        if workers < 1:
            raise UsageError("--workers must be at least 1", field='workers')
        return workers

    def out_dir(self, options):
        out = Path(options['out']) if options.get('out') else settings.RUNS_DIR / self.out_name
        out.mkdir(parents=True, exist_ok=True)
        return out

    def load_cache(self, path, config):
        """Charge le cache de prises et vérifie qu'il couvre les seaux d'échelle configurés.

        Raises:
            UsageError: Si un seau attendu manque (cache généré avec d'autres plages).
        """
        path = Path(path) if path else settings.RUNS_DIR / 'grasps' / 'grasps.rlgc'
        cache = crud.read_grasp_cache(path)
        lo = min(config['train_ranges']['scale'][0], config['test_ranges']['scale'][0])
        hi = max(config['train_ranges']['scale'][1], config['test_ranges']['scale'][1])
        expected = scale_buckets(lo, hi, config['scale_bucket_step'])
        known = np.round(cache.bucket_scales, 4)
        missing = [float(s) for s in expected if not np.any(np.isclose(known, s, atol=1e-4))]
        if missing:
            raise UsageError(f"Grasp cache {path} is stale for the configured scale ranges; rerun gen-grasps",
                             field='grasps', details={'missing_buckets': missing})
        return cache, path

    def start(self, config, seed, inputs=None):
        return cli.start_manifest(self.command_name(), config, seed, inputs)

    def finish(self, manifest, out_dir, artifacts):
        cli.finish_manifest(manifest, out_dir, artifacts)
        for name, path in artifacts.items():
            self.stdout.write(f"{name}: {path}")

    def command_name(self):
        return self.__module__.rsplit('.', 1)[-1]
