import copy
import json
import logging
import os

from django.conf import settings

from rotlab.utils.error_manage import ValidationError

logger = logging.getLogger(__name__)


def _parse_env_value(raw):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def extract_profile(name, erreurs):
    """Récupère la surcharge d'un profil nommé.

    Args:
        name (str): Nom du profil (smoke, desk, full).
        erreurs (dict): Un dictionnaire pour stocker les erreurs de validation

    Raises:
        ValidationError: Si le profil n'existe pas.

    Returns:
        dict: Les clés surchargées par le profil.
    """
    profiles = settings.ROTLAB_PROFILES
    if name not in profiles:
        erreurs['profile'] = f"Unknown profile '{name}'; expected one of {sorted(profiles)}"
        raise ValidationError("Erreur(s) dans la configuration", field='profile', details=erreurs)
    return copy.deepcopy(profiles[name])


def extract_config_file(path, erreurs):
    """Lit un document de configuration JSON (objet à plat)."""
    if not path:
        return {}
    try:
        with open(path, encoding='utf-8') as handle:
            data = json.load(handle)
    except FileNotFoundError:
        erreurs['config'] = f"File not found: {path}"
        raise ValidationError("Erreur(s) dans la configuration", field='config', details=erreurs)
    except json.JSONDecodeError as e:
        erreurs['config'] = f"Invalid JSON: {e}"
        raise ValidationError("Erreur(s) dans la configuration", field='config', details=erreurs)
    if not isinstance(data, dict):
        erreurs['config'] = "Top-level JSON value must be an object"
        raise ValidationError("Erreur(s) dans la configuration", field='config', details=erreurs)
    if 'command' in data and isinstance(data.get('config'), dict):
        # manifeste d'exécution : on rejoue sa configuration figée
        logger.info(f"Replaying the configuration of run manifest {path}")
        return data['config']
    return data


def extract_env_overrides(environ=None):
    """Surcharges ``ROTLAB_CFG_<CLE>`` ; les valeurs sont lues en JSON, à défaut en texte brut."""
    environ = os.environ if environ is None else environ
    prefix = settings.CONFIG_ENV_PREFIX
    return {key[len(prefix):].lower(): _parse_env_value(value)
            for key, value in environ.items() if key.startswith(prefix)}


def extract_config(profile=None, config_path=None, flags=None, environ=None):
    """Assemble la configuration : défauts < profil < JSON < environnement < options.

    Args:
        profile (str, optional): Nom du profil. Defaults to ``settings.DEFAULT_PROFILE``.
        config_path (str, optional): Document JSON.
        flags (dict, optional): Options explicites de la ligne de commande (None ignorés).
        environ (dict, optional): Variables d'environnement. Defaults to os.environ.

    Raises:
        ValidationError: Si une clé est inconnue ou un document illisible.

    Returns:
        dict: La configuration à plat.
    """
    erreurs = {}
    config = copy.deepcopy(settings.BASE_CONFIG)
    config.update(extract_profile(profile or settings.DEFAULT_PROFILE, erreurs))
    layers = [('config', extract_config_file(config_path, erreurs)),
              ('environment', extract_env_overrides(environ)),
              ('flags', {k: v for k, v in (flags or {}).items() if v is not None})]
    for source, layer in layers:
        unknown = sorted(set(layer) - set(settings.BASE_CONFIG))
        if unknown:
            erreurs[source] = f"Unknown key(s): {', '.join(unknown)}"
        config.update({k: v for k, v in layer.items() if k in settings.BASE_CONFIG})
    if erreurs:
        raise ValidationError("Erreur(s) dans la configuration", details=erreurs)
    return config


def validate_config(config, sections):
    """Valide les sections demandées avec leurs formulaires.

    Args:
        config (dict): Configuration à plat.
        sections (list): Parmi 'env', 'train', 'adapt', 'eval'.

    Raises:
        ValidationError: Avec un dictionnaire d'erreurs par section et par champ.

    Returns:
        dict: La configuration, valeurs converties par les formulaires.
    """
    from rotation.form import SECTION_FORMS

    erreurs = {}
    cleaned = dict(config)
    for section in sections:
        form = SECTION_FORMS[section](data=config)
        if form.is_valid():
            cleaned.update(form.cleaned_data)
        else:
            erreurs[section] = {field: "; ".join(str(m) for m in messages)
                                for field, messages in form.errors.items()}
    if erreurs:
        logger.error(f"Invalid configuration: {erreurs}")
        raise ValidationError("Erreur(s) dans la configuration", details=erreurs)
    return cleaned
