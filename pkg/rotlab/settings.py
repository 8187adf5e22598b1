"""
Django settings for the rotlab project.

Le projet n'a pas de surface web : Django fournit ici la configuration,
les commandes de gestion (``manage.py <sous-commande>``), la validation par
formulaires et le lanceur de tests.

Toutes les valeurs réglables peuvent être surchargées par des variables
d'environnement préfixées par ``ROTLAB_`` (voir README.md).
"""

from pathlib import Path
import os

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent


SECRET_KEY = os.environ.get('ROTLAB_SECRET_KEY', 'rotlab-local-only')

DEBUG = False

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'rotlab',
    'rotation',
]

# Pas de base de données : aucune table, aucun modèle persistant.
DATABASES = {}

USE_TZ = True
TIME_ZONE = 'UTC'

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'


# Logging

LOG_LEVEL = os.environ.get('ROTLAB_LOG_LEVEL', 'INFO').upper()

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'simple': {'format': '%(levelname)s:%(name)s:%(message)s'},
    },
    'handlers': {
        'console': {'class': 'logging.StreamHandler', 'formatter': 'simple'},
    },
    'loggers': {
        'rotation': {'handlers': ['console'], 'level': LOG_LEVEL, 'propagate': False},
        'rotlab': {'handlers': ['console'], 'level': LOG_LEVEL, 'propagate': False},
    },
}


# Laboratoire

ROTLAB_VERSION = '1.0.0'

RUNS_DIR = Path(os.environ.get('ROTLAB_RUNS_DIR', BASE_DIR / 'runs'))

DEFAULT_PROFILE = os.environ.get('ROTLAB_PROFILE', 'desk')
DEFAULT_SEED = int(os.environ.get('ROTLAB_SEED', '0'))
DEFAULT_WORKERS = int(os.environ.get('ROTLAB_WORKERS', '1'))

# Préfixe des surcharges de clés de configuration : ROTLAB_CFG_<CLE>=<valeur JSON>
CONFIG_ENV_PREFIX = 'ROTLAB_CFG_'

# Plages de randomisation. COM en mètres, masse en kg.
TRAIN_RANGES = {
    'scale': [0.70, 0.86],
    'mass': [0.01, 0.25],
    'friction': [0.3, 3.0],
    'com': [-0.01, 0.01],
    'kp': [2.9, 3.1],
    'kd': [0.09, 0.11],
}

TEST_RANGES = {
    'scale': [0.66, 0.90],
    'mass': [0.01, 0.30],
    'friction': [0.2, 3.5],
    'com': [-0.0125, 0.0125],
    'kp': [2.6, 3.4],
    'kd': [0.08, 0.12],
}

# Valeurs par défaut de toutes les clés ; les profils ne surchargent que l'écart.
BASE_CONFIG = {
    # env
    'num_envs': 256,
    'episode_len': 150,
    'history_len': 30,
    'rotation_sign': -1,
    'randomize': True,
    'train_ranges': TRAIN_RANGES,
    'test_ranges': TEST_RANGES,
    'train_disturbance_scale': 2.0,
    'test_disturbance_scale': 4.0,
    'disturbance_prob': 0.25,
    'ood_lobed_fraction': 0.2,
    'ood_lobe_eps_max': 0.15,
    'joint_noise': 0.005,
    'c_max_train': 0.02,
    'c_max_eval': 0.03,
    'drop_patience': 10,
    'r_min': -0.5,
    'r_max': 0.5,
    'lambda_pose': 0.3,
    'lambda_torque': 0.1,
    'lambda_work': 2.0,
    'lambda_linvel': 0.3,
    'scale_bucket_step': 0.02,
    'grasps_per_bucket': 1000,
    'grasp_offset': 0.25,
    'grasp_settle_time': 0.5,
    'grasp_tip_bound': 0.02,
    # train
    'variant': 'rma',
    'obs_pairs': 3,
    'horizon': 8,
    'epochs': 5,
    'minibatches': 4,
    'lr': 3e-4,
    'gamma': 0.99,
    'gae_lambda': 0.95,
    'clip_eps': 0.2,
    'entropy_coef': 1e-3,
    'value_coef': 0.5,
    'max_grad_norm': 1.0,
    'max_updates': 2000,
    'checkpoint_every': 100,
    'eval_every': 50,
    'divergence_floor': -50.0,
    'divergence_patience': 5,
    'init_log_std': -1.0,
    # adapt
    'adapt_lr': 3e-4,
    'adapt_iterations': 200,
    'adapt_horizon': 50,
    'adapt_epochs': 4,
    'adapt_batch': 512,
    'adapt_plateau_tol': 0.01,
    'adapt_plateau_patience': 5,
    'adapt_holdout': 0.1,
    # eval
    'episodes': 200,
    'seeds': [0, 1, 2],
    'swap_every': 0,
    'periodic_retries': 10,
}

ROTLAB_PROFILES = {
    'smoke': {
        'num_envs': 8,
        'episode_len': 40,
        'max_updates': 20,
        'checkpoint_every': 10,
        'eval_every': 10,
        'grasps_per_bucket': 16,
        'adapt_iterations': 3,
        'adapt_horizon': 35,
        'adapt_batch': 64,
        'episodes': 4,
        'seeds': [0],
    },
    'desk': {},
    'full': {
        'num_envs': 16384,
        'episode_len': 400,
        'minibatches': 4,
        'lr': 5e-3,
        'max_updates': 5000,
        'grasps_per_bucket': 50000,
        'episodes': 500000,
        'seeds': [0, 1, 2, 3, 4],
    },
}
