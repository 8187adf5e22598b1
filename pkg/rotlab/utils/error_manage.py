"""
Exceptions du laboratoire et gestion des erreurs des commandes.
"""
import logging
from functools import wraps

from django.core.management.base import CommandError

logger = logging.getLogger(__name__)

EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_FAULT = 3
EXIT_ACCEPTANCE_FAILURE = 4


class LabError(Exception):
    def __init__(self, message, field=None, details=None):
        self.message = message
        self.field = field
        self.details = details or {}
        super().__init__(message)


class ValidationError(LabError):
    """Erreur de configuration (forme, plage, cohérence entre clés)."""


class UsageError(LabError):
    """Mauvais usage d'une API : cache périmé, largeur ou fenêtre incorrecte."""


class SimulationFault(LabError):
    """État de simulation non fini."""


class TrainingError(LabError):
    """Gradients non finis, divergence ou régression qui ne décroît pas."""


class AcceptanceFailure(LabError):
    """Un critère d'acceptation n'est pas atteint."""


def exit_code_for(error):
    """Associe une exception au code de sortie de la CLI.

    Args:
        error (Exception): L'exception levée par la commande.

    Returns:
        int: 2 pour une erreur de configuration ou d'usage, 4 pour un échec
        d'acceptation, 3 sinon.
    """
    if isinstance(error, (ValidationError, UsageError)):
        return EXIT_CONFIG_ERROR
    if isinstance(error, AcceptanceFailure):
        return EXIT_ACCEPTANCE_FAILURE
    return EXIT_RUNTIME_FAULT


def format_details(details):
    """Aplatit un dictionnaire d'erreurs imbriqué en lignes lisibles."""
    lines = []
    for key, value in (details or {}).items():
        if isinstance(value, dict):
            lines.extend(f"{key}.{line}" for line in format_details(value))
        else:
            lines.append(f"{key}: {value}")
    return lines


def handle_command_errors(schema_hint='--help'):
    """Décorateur pour gérer les erreurs d'une commande de gestion.

    Args:
        schema_hint (str, optional): Où trouver le schéma de configuration,
            rappelé dans le message d'une erreur de configuration. Defaults to '--help'.
    """
    def decorator(handle_func):
        @wraps(handle_func)
        def wrapper(command, *args, **options):
            try:
                return handle_func(command, *args, **options)
            except CommandError:
                raise
            except LabError as e:
                code = exit_code_for(e)
                logger.error(f"{type(e).__name__} in {command.__module__}: {e.message}")
                lines = [e.message] + format_details(e.details)
                if code == EXIT_CONFIG_ERROR:
                    lines.append(f"Schéma de configuration : {schema_hint}")
                raise CommandError("\n".join(lines), returncode=code) from e
            except Exception as e:
                logger.error(f"Unexpected error in {command.__module__}: {str(e)}")
                raise CommandError(str(e), returncode=EXIT_RUNTIME_FAULT) from e
        return wrapper
    return decorator
