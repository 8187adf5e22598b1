"""
Point d'entrée de l'opérateur : sous-commandes à tirets traduites vers les
commandes de gestion Django, et manifestes d'exécution.
"""
import hashlib
import json
import logging
import sys

from django.conf import settings
from django.utils import timezone

from rotlab.utils import crud
from rotlab.utils.error_manage import EXIT_CONFIG_ERROR
from rotation.models import RunManifest

logger = logging.getLogger(__name__)

SUBCOMMANDS = {
    'gen-grasps': 'gen_grasps',
    'train-base': 'train_base',
    'train-adapt': 'train_adapt',
    'eval': 'eval',
    'record-periodic': 'record_periodic',
    'export-traces': 'export_traces',
    'probe': 'probe',
    'gradcheck': 'gradcheck',
}
PASSTHROUGH = {'test', 'help', 'check', 'shell', 'diffsettings', 'version'}


def resolve(name):
    if name in SUBCOMMANDS:
        return SUBCOMMANDS[name]
    if name in SUBCOMMANDS.values() or name in PASSTHROUGH or name.startswith('-'):
        return name
    return None


def dispatch(argv):
    """Exécute une sous-commande et renvoie son code de sortie.

    Args:
        argv (list): Arguments sans le nom du programme, ex. ['train-base', '--profile', 'smoke'].

    Returns:
        int: 0 en cas de succès, 2 pour une erreur de configuration, 3 pour une
        panne d'exécution, 4 pour un échec d'acceptation.
    """
    from django.core.management import execute_from_command_line

    if not argv:
        argv = ['help']
    name = resolve(argv[0])
    if name is None:
        sys.stderr.write(f"Unknown subcommand '{argv[0]}'. Expected one of: {', '.join(SUBCOMMANDS)}\n")
        return EXIT_CONFIG_ERROR
    try:
        execute_from_command_line(['manage.py', name] + list(argv[1:]))
    except SystemExit as e:
        code = e.code
        if code is None:
            return 0
        return code if isinstance(code, int) else 1
    return 0


def input_hash(config, inputs):
    """Empreinte du contenu des entrées : configuration figée et fichiers lus."""
    digest = hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode('utf-8'))
    for name in sorted(inputs):
        digest.update(name.encode('utf-8'))
        digest.update(crud.file_hash(inputs[name]).encode('utf-8'))
    return digest.hexdigest()


def start_manifest(command, config, seed, inputs=None):
    inputs = {k: str(v) for k, v in (inputs or {}).items()}
    return RunManifest(command=command, config=config, seed=seed, inputs=inputs,
                       tool_version=settings.ROTLAB_VERSION, started_at=timezone.now().isoformat(),
                       input_hash=input_hash(config, inputs))


def finish_manifest(manifest, out_dir, artifacts):
    manifest.artifacts = {k: str(v) for k, v in artifacts.items()}
    manifest.finished_at = timezone.now().isoformat()
    path = crud.write_manifest(out_dir, manifest)
    logger.info(f"Run manifest written: {path}")
    return path
