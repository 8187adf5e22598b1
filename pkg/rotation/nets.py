"""
Les fonctions apprises : encodeur d'extrinsèques, politique gaussienne,
critique et module d'adaptation temporel.
"""
import hashlib
import logging
import math
from dataclasses import dataclass

import numpy as np

from rotlab.utils.error_manage import UsageError, ValidationError
from rotation.models import Activation, PolicyVariant
from rotation.numkit import ConvStack, DenseNet, TRAIN_DTYPE, conv_forward, dense_forward

logger = logging.getLogger(__name__)

OBS_PAIR_WIDTH = 32
ACTION_WIDTH = 16
PRIVILEGED_WIDTH = 9
EXTRINSICS_WIDTH = 8
POLICY_HIDDEN = [512, 256, 128]
ENCODER_HIDDEN = [256, 128]
STEP_ENCODER = [32, 32]
LOG_2PI = math.log(2.0 * math.pi)

# (entrée, sortie, noyau, pas) par longueur de fenêtre
ADAPTATION_SPECS = {
    30: [(32, 32, 9, 2), (32, 32, 5, 1), (32, 32, 5, 1)],
    20: [(32, 32, 4, 2), (32, 32, 5, 1), (32, 32, 5, 1)],
    10: [(32, 32, 2, 1), (32, 32, 5, 1), (32, 32, 5, 1)],
}


@dataclass
class PolicyBundle:
    variant: PolicyVariant
    policy: DenseNet
    log_std: np.ndarray
    critic: DenseNet
    encoder: DenseNet = None
    adaptation: ConvStack = None
    obs_pairs: int = 3

    @property
    def obs_width(self):
        return OBS_PAIR_WIDTH * self.obs_pairs

    @property
    def z_width(self):
        if self.variant is PolicyVariant.RMA:
            return EXTRINSICS_WIDTH
        if self.variant is PolicyVariant.SYSID:
            return PRIVILEGED_WIDTH
        return 0

    @property
    def history_len(self):
        return self.adaptation.history_len if self.adaptation is not None else None

    def modules(self):
        return [m for m in (self.encoder, self.policy, self.critic, self.adaptation) if m is not None]


def adaptation_specs(history_len):
    if history_len in ADAPTATION_SPECS:
        return ADAPTATION_SPECS[history_len]
    # autres longueurs : la pile par défaut, rejetée si le champ récepteur dépasse
    return ADAPTATION_SPECS[30]


def build_bundle(variant, rng, obs_pairs=3, init_log_std=-1.0, rest_pose=None):
    """Construit les réseaux de la phase 1 pour une variante.

    Args:
        variant (PolicyVariant): RMA, SYSID ou DR.
        rng (np.random.Generator): Générateur d'initialisation.
        obs_pairs (int, optional): Paires (q, a) en entrée de la politique. Defaults to 3.
        init_log_std (float, optional): Log-écart-type initial. Defaults to -1.0.
        rest_pose (np.ndarray, optional): Posture de repos servant de biais de sortie.

    Returns:
        PolicyBundle: Encodeur (RMA), politique et critique.
    """
    variant = PolicyVariant(variant)
    if variant is not PolicyVariant.DR and obs_pairs != 3:
        raise ValidationError("Only the DR variant accepts a longer observation window", field='obs_pairs')
    encoder = None
    if variant is PolicyVariant.RMA:
        encoder = DenseNet.build([PRIVILEGED_WIDTH] + ENCODER_HIDDEN + [EXTRINSICS_WIDTH],
                                 Activation.RELU, Activation.TANH, rng)
    bundle = PolicyBundle(variant=variant, policy=None, log_std=None, critic=None, encoder=encoder,
                          obs_pairs=obs_pairs)
    width = bundle.obs_width + bundle.z_width
    policy = DenseNet.build([width] + POLICY_HIDDEN + [ACTION_WIDTH], Activation.ELU, Activation.IDENTITY,
                            rng, last_scale=0.01)
    if rest_pose is not None:
        policy.layers[-1].bias[:] = np.asarray(rest_pose, dtype=TRAIN_DTYPE)
    bundle.policy = policy
    bundle.critic = DenseNet.build([width] + POLICY_HIDDEN + [1], Activation.ELU, Activation.IDENTITY,
                                   rng, zero_last=True)
    bundle.log_std = np.full(ACTION_WIDTH, init_log_std, dtype=TRAIN_DTYPE)
    return bundle


def build_adaptation(bundle, rng, history_len=30):
    """Ajoute le module d'adaptation (phase 2) ; sortie tanh pour RMA, identité pour SysID."""
    if bundle.variant is PolicyVariant.DR:
        raise UsageError("The DR variant has no extrinsics to estimate")
    output = Activation.TANH if bundle.variant is PolicyVariant.RMA else Activation.IDENTITY
    bundle.adaptation = ConvStack.build(OBS_PAIR_WIDTH, STEP_ENCODER, adaptation_specs(history_len),
                                        bundle.z_width, history_len, rng, output=output)
    logger.info(f"Adaptation module built: T={history_len}, lengths {bundle.adaptation.lengths}")
    return bundle.adaptation


def encode_extrinsics(bundle, privileged):
    """z = mu(e) ; identité pour SysID."""
    privileged = np.asarray(privileged)
    if privileged.shape[-1] != PRIVILEGED_WIDTH:
        raise ValidationError(f"Privileged vector must have width {PRIVILEGED_WIDTH}", field='e')
    if bundle.variant is PolicyVariant.SYSID:
        return privileged.astype(TRAIN_DTYPE)
    if bundle.variant is PolicyVariant.DR:
        raise UsageError("The DR variant takes no extrinsics")
    return dense_forward(bundle.encoder, privileged)[0]


def policy_input(bundle, obs, z=None):
    obs = np.asarray(obs, dtype=TRAIN_DTYPE)
    if obs.shape[-1] != bundle.obs_width:
        raise ValidationError(f"Observation width {obs.shape[-1]} does not match {bundle.obs_width}",
                              field='observation')
    if bundle.z_width == 0:
        return obs
    z = np.asarray(z, dtype=TRAIN_DTYPE)
    if z.shape[-1] != bundle.z_width:
        raise ValidationError(f"Extrinsics width {z.shape[-1]} does not match {bundle.z_width}", field='z')
    return np.concatenate([obs, z], axis=-1)


def log_prob(mean, log_std, actions):
    std = np.exp(log_std)
    return np.sum(-0.5 * ((actions - mean) / std) ** 2 - log_std - 0.5 * LOG_2PI, axis=-1)


def entropy(log_std):
    return float(np.sum(log_std + 0.5 * (LOG_2PI + 1.0)))


def policy_mean(bundle, obs, z=None):
    return dense_forward(bundle.policy, policy_input(bundle, obs, z))


def policy_act(bundle, obs, z=None, mode='mean', rng=None, noise=None):
    """Action de la politique et sa log-probabilité.

    Args:
        bundle (PolicyBundle): Les réseaux.
        obs (np.ndarray): Observations (B, 32k) ou (32k,).
        z (np.ndarray, optional): Extrinsèques (ou vecteur privilégié pour SysID).
        mode (str, optional): 'mean' ou 'sample'. Defaults to 'mean'.
        rng (np.random.Generator, optional): Requis en mode 'sample' sans bruit fourni.
        noise (np.ndarray, optional): Bruit normal standard déjà tiré, de la forme des actions.

    Returns:
        tuple: (actions, log-probabilités)
    """
    mean, _ = policy_mean(bundle, obs, z)
    if mode == 'mean':
        actions = mean.astype(np.float64)
    elif mode == 'sample':
        if noise is None:
            if rng is None:
                raise UsageError("Sampling requires a generator or pre-drawn noise", field='rng')
            noise = rng.standard_normal(mean.shape)
        actions = mean + np.exp(bundle.log_std) * noise
    else:
        raise UsageError(f"Unknown action mode: {mode}", field='mode')
    return actions, log_prob(mean, bundle.log_std, actions)


def critic_value(bundle, obs, z=None):
    value, _ = dense_forward(bundle.critic, policy_input(bundle, obs, z))
    return value[..., 0]


def adapt_estimate(bundle, history):
    """Estimation des extrinsèques à partir d'une fenêtre (T, 32) ou d'un lot (B, T, 32)."""
    if bundle.adaptation is None:
        raise UsageError("Bundle has no adaptation module")
    return conv_forward(bundle.adaptation, history)[0]


def param_hash(modules, extra=()):
    """Empreinte SHA-256 des paramètres, pour vérifier qu'un réseau est resté figé."""
    digest = hashlib.sha256()
    for module in modules:
        if module is None:
            continue
        for p in module.parameters():
            digest.update(np.ascontiguousarray(p, dtype=TRAIN_DTYPE).tobytes())
    for p in extra:
        digest.update(np.ascontiguousarray(p, dtype=TRAIN_DTYPE).tobytes())
    return digest.hexdigest()


def bundle_hash(bundle):
    return param_hash(bundle.modules(), extra=(bundle.log_std,))


def base_hash(bundle):
    """Empreinte des réseaux de phase 1 (encodeur, politique, critique, log_std), figés en phase 2."""
    return param_hash([bundle.encoder, bundle.policy, bundle.critic], extra=(bundle.log_std,))
