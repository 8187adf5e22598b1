"""
Environnement de rotation en main : randomisation, prises initiales,
observations, récompense, terminaison et pas vectorisé sur un lot
d'environnements.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from rotlab.utils.error_manage import UsageError, ValidationError
from rotation import handsim
from rotation.handsim import NUM_JOINTS, HandModel, PhysParams, SimState
from rotation.models import Distribution, DoneCause, StreamPurpose

logger = logging.getLogger(__name__)

PRIVILEGED_WIDTH = 9
PAIR_WIDTH = 2 * NUM_JOINTS
PRIVILEGED_BOUND = 1.5
RANGE_KEYS = ('scale', 'mass', 'friction', 'com', 'kp', 'kd')


@dataclass
class EnvConfig:
    num_envs: int = 256
    episode_len: int = 150
    history_len: int = 30
    obs_pairs: int = 3
    rotation_sign: int = -1
    randomize: bool = True
    train_ranges: dict = field(default_factory=dict)
    test_ranges: dict = field(default_factory=dict)
    train_disturbance_scale: float = 2.0
    test_disturbance_scale: float = 4.0
    disturbance_prob: float = 0.25
    ood_lobed_fraction: float = 0.2
    ood_lobe_eps_max: float = 0.15
    joint_noise: float = 0.005
    c_max_train: float = 0.02
    c_max_eval: float = 0.03
    drop_patience: int = 10
    r_min: float = -0.5
    r_max: float = 0.5
    lambda_pose: float = 0.3
    lambda_torque: float = 0.1
    lambda_work: float = 2.0
    lambda_linvel: float = 0.3
    scale_bucket_step: float = 0.02
    grasps_per_bucket: int = 1000
    grasp_offset: float = 0.25
    grasp_settle_time: float = 0.5
    grasp_tip_bound: float = 0.02
    seed: int = 0

    def __post_init__(self):
        from django.conf import settings
        if not self.train_ranges:
            self.train_ranges = {k: list(v) for k, v in settings.TRAIN_RANGES.items()}
        if not self.test_ranges:
            self.test_ranges = {k: list(v) for k, v in settings.TEST_RANGES.items()}
        self.check()

    @classmethod
    def from_config(cls, config, **overrides):
        """Construit un EnvConfig à partir d'un dictionnaire de configuration à plat."""
        names = {f.name for f in fields(cls)}
        values = {k: v for k, v in config.items() if k in names}
        values.update(overrides)
        return cls(**values)

    def check(self):
        erreurs = {}
        window = max(self.history_len, self.obs_pairs)
        if self.episode_len <= window:
            erreurs['episode_len'] = f"must exceed the history length ({window})"
        if self.r_min >= self.r_max:
            erreurs['r_min'] = "r_min must be lower than r_max"
        if self.rotation_sign not in (-1, 1):
            erreurs['rotation_sign'] = "must be -1 or 1"
        for name, ranges in (('train_ranges', self.train_ranges), ('test_ranges', self.test_ranges)):
            for key in RANGE_KEYS:
                bounds = ranges.get(key)
                if bounds is None or len(bounds) != 2:
                    erreurs[f'{name}.{key}'] = "expected [lo, hi]"
                elif bounds[0] > bounds[1]:
                    erreurs[f'{name}.{key}'] = "range must be ordered"
        if erreurs:
            raise ValidationError("Invalid environment configuration", details=erreurs)

    def ranges(self, distribution):
        return self.train_ranges if distribution is Distribution.TRAIN else self.test_ranges


def stream(seed, env_id, purpose, tick):
    """Générateur à compteur propre à (graine, env, usage, pas) : indépendant de l'ordonnancement."""
    return np.random.Generator(np.random.Philox(
        key=np.array([seed, env_id], dtype=np.uint64),
        counter=np.array([0, purpose.value, tick, 0], dtype=np.uint64)))


def stream_uniform(seed, env_ids, purpose, ticks, size):
    return np.stack([stream(seed, int(e), purpose, int(t)).random(size) for e, t in zip(env_ids, ticks)])


def scale_buckets(lo, hi, step):
    count = int(round((hi - lo) / step)) + 1
    return np.round(lo + step * np.arange(count), 6)


def nearest_bucket(buckets, scale):
    return np.argmin(np.abs(np.asarray(buckets)[None, :] - np.atleast_1d(scale)[:, None]), axis=1)


def _uniform(rng, bounds, size):
    lo, hi = bounds
    return rng.uniform(lo, hi, size) if hi > lo else np.full(size, float(lo))


def randomize(config, rng, distribution, n=1):
    """Tire les paramètres physiques de ``n`` environnements.

    Args:
        config (EnvConfig): Plages de randomisation.
        rng (np.random.Generator): Générateur.
        distribution (Distribution): TRAIN ou OOD.
        n (int, optional): Nombre d'environnements. Defaults to 1.

    Returns:
        PhysParams: Paramètres tirés uniformément dans les plages de la distribution.
    """
    if not isinstance(distribution, Distribution):
        raise ValidationError(f"Unknown distribution: {distribution}", field='distribution')
    ood = distribution is Distribution.OOD
    ranges = config.ranges(distribution)
    disturbance = config.test_disturbance_scale if ood else config.train_disturbance_scale

    if not ood and not config.randomize:
        mid = {k: 0.5 * (lo + hi) for k, (lo, hi) in ranges.items()}
        return PhysParams.nominal(n, scale=mid['scale'], mass=mid['mass'], friction=mid['friction'],
                                  kp=mid['kp'], kd=mid['kd'], disturbance_scale=disturbance)

    params = PhysParams(
        scale=_uniform(rng, ranges['scale'], n),
        mass=_uniform(rng, ranges['mass'], n),
        friction=_uniform(rng, ranges['friction'], n),
        com_offset=_uniform(rng, ranges['com'], (n, 2)),
        kp=_uniform(rng, ranges['kp'], n),
        kd=_uniform(rng, ranges['kd'], n),
        lobe_m=np.zeros(n, dtype=np.int64),
        lobe_eps=np.zeros(n),
        disturbance_scale=np.full(n, disturbance),
    )
    if ood:
        lobed = rng.random(n) < config.ood_lobed_fraction
        params.lobe_m = np.where(lobed, np.where(rng.random(n) < 0.5, 3, 4), 0)
        params.lobe_eps = np.where(lobed, rng.uniform(0.05, max(config.ood_lobe_eps_max, 0.05), n), 0.0)
    return params


def privileged_vector(params, state, config):
    """Vecteur privilégié normalisé (N, 9) : position (2), échelle, masse, frottement, COM (2), kp, kd.

    Chaque entrée est ramenée à [-1, 1] sur les plages d'entraînement puis bornée à ±1.5.
    """
    ranges = config.train_ranges

    def norm(value, bounds):
        lo, hi = bounds
        if hi <= lo:
            return np.zeros_like(value)
        return 2.0 * (value - lo) / (hi - lo) - 1.0

    position = state.center / config.c_max_train
    columns = [
        position,
        norm(params.scale, ranges['scale'])[:, None],
        norm(params.mass, ranges['mass'])[:, None],
        norm(params.friction, ranges['friction'])[:, None],
        norm(params.com_offset, ranges['com']),
        norm(params.kp, ranges['kp'])[:, None],
        norm(params.kd, ranges['kd'])[:, None],
    ]
    return np.clip(np.concatenate(columns, axis=1), -PRIVILEGED_BOUND, PRIVILEGED_BOUND)


def reward_terms(omega_k, pose_error, torque, joint_vel, lin_vel, config):
    """Termes de récompense ; chaque pénalité diminue la récompense.

    Args:
        omega_k (np.ndarray): Vitesse angulaire projetée sur l'axe de rotation (N,).
        pose_error (np.ndarray): q - q_init (N, 16).
        torque (np.ndarray): Couple moteur moyen du pas (N, 16).
        joint_vel (np.ndarray): Vitesses articulaires (N, 16).
        lin_vel (np.ndarray): Vitesse linéaire de l'objet (N, 2).
        config (EnvConfig): Coefficients.

    Returns:
        tuple: (récompense (N,), dict des termes)
    """
    terms = {
        'rotation': np.clip(omega_k, config.r_min, config.r_max),
        'pose': -config.lambda_pose * np.sum(pose_error ** 2, axis=-1),
        'torque': -config.lambda_torque * np.sum(torque ** 2, axis=-1),
        'work': -config.lambda_work * np.sum(torque * joint_vel, axis=-1),
        'linvel': -config.lambda_linvel * np.sum(lin_vel ** 2, axis=-1),
    }
    reward = terms['rotation'] + terms['pose'] + terms['torque'] + terms['work'] + terms['linvel']
    return reward, terms


def compute_reward(after, q_init, config):
    """Récompense du pas à partir de l'état atteint ; le travail utilise les vitesses articulaires simulées."""
    omega_k = config.rotation_sign * after.ang_vel
    return reward_terms(omega_k, after.q - q_init, after.torque, after.qd, after.lin_vel, config)


@dataclass
class GraspCache:
    bucket_scales: np.ndarray
    bucket_ids: np.ndarray
    q: np.ndarray
    pose: np.ndarray

    def __len__(self):
        return len(self.bucket_ids)

    def counts(self):
        return np.bincount(self.bucket_ids, minlength=len(self.bucket_scales))

    def entries(self, bucket):
        return np.flatnonzero(self.bucket_ids == bucket)

    def draw(self, bucket, u):
        """Choisit une prise du seau ``bucket`` avec un uniforme ``u`` dans [0, 1)."""
        idx = self.entries(bucket)
        if len(idx) == 0:
            raise ValidationError(f"Grasp cache has no entry for scale {self.bucket_scales[bucket]:.2f}",
                                  field='grasp_cache')
        pick = idx[min(int(u * len(idx)), len(idx) - 1)]
        return self.q[pick], self.pose[pick]

    @staticmethod
    def concat(parts, bucket_scales):
        return GraspCache(bucket_scales=np.asarray(bucket_scales, dtype=np.float64),
                          bucket_ids=np.concatenate([p.bucket_ids for p in parts]).astype(np.int64),
                          q=np.concatenate([p.q for p in parts]),
                          pose=np.concatenate([p.pose for p in parts]))


def grasp_accepted(state, params, model, config):
    """Prédicat d'acceptation d'une prise après stabilisation."""
    tips, _ = handsim.fingertip_fk(model, state.q)
    rel = tips - state.center[:, None, :]
    dist = np.linalg.norm(rel, axis=-1)
    local = np.arctan2(rel[..., 1], rel[..., 0]) - state.yaw[:, None]
    gap = np.abs(dist - handsim.surface_radius(model, params, local))
    near = np.all(gap <= config.grasp_tip_bound, axis=1)
    touching = state.contact_active.sum(axis=1) >= 2
    centered = np.linalg.norm(state.center, axis=1) < config.c_max_train
    return near & touching & centered & ~state.fault & state.finite()


def settle(q, params, model, config, center=None, yaw=None):
    """Simule ``grasp_settle_time`` secondes sans perturbation, cibles tenues sur ``q``."""
    state = SimState.at_rest(q, center=center, yaw=yaw)
    steps = int(round(config.grasp_settle_time / model.control_dt))
    for _ in range(steps):
        state = handsim.step_physics(state, q, params, model, disturbances=False)
    return state


def _nominal_params(config, scale, n):
    mid = {k: 0.5 * (lo + hi) for k, (lo, hi) in config.train_ranges.items()}
    return PhysParams.nominal(n, scale=scale, mass=mid['mass'], friction=mid['friction'],
                              kp=mid['kp'], kd=mid['kd'], disturbance_scale=0.0)


def generate_grasps(config, count, rng, model=None, buckets=None, batch=256, max_candidates=10000):
    """Pré-échantillonne des prises stables pour chaque seau d'échelle.

    Args:
        config (EnvConfig): Configuration (décalage, durée de stabilisation, bornes).
        count (int): Nombre de prises visées par seau.
        rng (np.random.Generator): Générateur des décalages.
        model (HandModel, optional): La main. Defaults to None.
        buckets (np.ndarray, optional): Échelles des seaux ; par défaut les seaux des plages de test.
        batch (int, optional): Candidats simulés ensemble. Defaults to 256.
        max_candidates (int, optional): Candidats maximum par seau. Defaults to 10000.

    Raises:
        ValidationError: Si le taux d'acceptation d'un seau est inférieur à 1 %.

    Returns:
        GraspCache: Les prises acceptées.
    """
    model = model or HandModel()
    if buckets is None:
        lo, hi = config.test_ranges['scale']
        buckets = scale_buckets(lo, hi, config.scale_bucket_step)
    parts = []
    for bucket_id, scale in enumerate(buckets):
        canonical = handsim.canonical_grasp(model, scale)
        accepted_q, accepted_pose, tried = [], [], 0
        while sum(len(a) for a in accepted_q) < count and tried < max_candidates:
            n = min(batch, max_candidates - tried)
            offsets = rng.uniform(-config.grasp_offset, config.grasp_offset, (n, NUM_JOINTS))
            if tried == 0:
                offsets[0] = 0.0
            candidates = np.clip(canonical + offsets, model.lower, model.upper)
            params = _nominal_params(config, scale, n)
            state = settle(candidates, params, model, config)
            ok = grasp_accepted(state, params, model, config)
            accepted_q.append(state.q[ok])
            accepted_pose.append(np.concatenate([state.center[ok], state.yaw[ok, None]], axis=1))
            tried += n
        q = np.concatenate(accepted_q)[:count]
        pose = np.concatenate(accepted_pose)[:count]
        rate = len(np.concatenate(accepted_q)) / max(tried, 1)
        if len(q) == 0 or (tried >= max_candidates and rate < 0.01):
            raise ValidationError(
                f"Canonical grasp unusable at scale {scale:.2f}",
                field='grasp', details={'scale': float(scale), 'acceptance_rate': rate, 'candidates': tried})
        if len(q) < count:
            logger.warning(f"Scale {scale:.2f}: only {len(q)}/{count} grasps accepted")
        logger.info(f"Grasp bucket {scale:.2f}: {len(q)} accepted, rate {rate:.1%}")
        parts.append(GraspCache(bucket_scales=np.asarray(buckets), bucket_ids=np.full(len(q), bucket_id),
                                q=q, pose=pose))
    return GraspCache.concat(parts, buckets)


def verify_grasps(cache, config, model=None, limit=None, batch=256):
    """Re-simule les prises du cache et renvoie la fraction qui satisfait encore le prédicat."""
    model = model or HandModel()
    ids = np.arange(len(cache)) if limit is None else np.arange(min(limit, len(cache)))
    accepted = 0
    for chunk in np.array_split(ids, max(1, int(np.ceil(len(ids) / batch)))):
        if len(chunk) == 0:
            continue
        scales = cache.bucket_scales[cache.bucket_ids[chunk]]
        params = _nominal_params(config, 0.0, len(chunk))
        params.scale = scales.astype(np.float64)
        state = settle(cache.q[chunk], params, model, config,
                       center=cache.pose[chunk, :2], yaw=cache.pose[chunk, 2])
        accepted += int(np.sum(grasp_accepted(state, params, model, config)))
    return accepted / max(len(ids), 1)


@dataclass
class StepInfo:
    privileged: np.ndarray
    done_cause: np.ndarray
    omega_k: np.ndarray
    lin_speed: np.ndarray
    torque_l1: np.ndarray
    rotation_increment: np.ndarray
    terms: dict
    episode_rotation: np.ndarray
    episode_length: np.ndarray


class RotationEnv:
    """Lot d'environnements de rotation en main, chacun avec ses flux aléatoires propres.

    Args:
        config (EnvConfig): Configuration de l'environnement.
        cache (GraspCache): Prises initiales.
        distribution (Distribution, optional): TRAIN ou OOD. Defaults to TRAIN.
        seed (int, optional): Graine des flux. Defaults to ``config.seed``.
        env_ids (np.ndarray, optional): Identifiants des environnements du lot.
        model (HandModel, optional): La main.
        workers (int, optional): Threads de simulation. Defaults to 1.
        evaluation (bool, optional): Seuil de chute d'évaluation. Defaults to False.
        auto_reset (bool, optional): Réinitialise les environnements terminés. Defaults to True.
    """

    def __init__(self, config, cache, distribution=Distribution.TRAIN, seed=None, env_ids=None,
                 model=None, workers=1, evaluation=False, auto_reset=True, disturbances=True):
        self.config = config
        self.cache = cache
        self.distribution = distribution
        self.seed = config.seed if seed is None else seed
        self.env_ids = np.arange(config.num_envs) if env_ids is None else np.asarray(env_ids)
        self.num_envs = len(self.env_ids)
        self.model = model or HandModel()
        self.workers = max(1, workers)
        self.c_max = config.c_max_eval if evaluation else config.c_max_train
        self.auto_reset = auto_reset
        self.disturbances = disturbances
        self.window = max(config.history_len, config.obs_pairs)

        n = self.num_envs
        self.ticks = np.zeros(n, dtype=np.int64)
        self.episodes = np.zeros(n, dtype=np.int64)
        self.steps = np.zeros(n, dtype=np.int64)
        self.low_contact = np.zeros(n, dtype=np.int64)
        self.history = np.zeros((n, self.window, PAIR_WIDTH))
        self.q_init = np.zeros((n, NUM_JOINTS))
        self.params = None
        self.state = None

    @property
    def obs_width(self):
        return PAIR_WIDTH * self.config.obs_pairs

    def reset(self, ids=None):
        """Réinitialise les environnements ``ids`` (tous par défaut) et renvoie les observations."""
        ids = np.arange(self.num_envs) if ids is None else np.asarray(ids)
        if len(ids) == 0:
            return self.observation()
        params, qs, poses, noise = [], [], [], []
        for i in ids:
            rng = stream(self.seed, self.env_ids[i], StreamPurpose.RESET, self.episodes[i])
            p = randomize(self.config, rng, self.distribution)
            bucket = int(nearest_bucket(self.cache.bucket_scales, p.scale)[0])
            p.scale = np.array([self.cache.bucket_scales[bucket]])
            q, pose = self.cache.draw(bucket, rng.random())
            params.append(p)
            qs.append(q)
            poses.append(pose)
            noise.append(self.config.joint_noise * rng.random(NUM_JOINTS))
        params = PhysParams.concat(params)
        qs, poses = np.stack(qs), np.stack(poses)
        fresh = SimState.at_rest(qs, center=poses[:, :2], yaw=poses[:, 2])

        if self.state is None:
            self.params, self.state = params, fresh
        else:
            self.params.put(ids, params)
            self.state.put(ids, fresh)
        self.q_init[ids] = qs
        self.steps[ids] = 0
        self.low_contact[ids] = 0
        self.episodes[ids] += 1

        noisy = qs + np.stack(noise)
        self.history[ids] = np.concatenate([qs, qs], axis=1)[:, None, :]
        self.history[ids, -1] = np.concatenate([noisy, qs], axis=1)
        return self.observation()

    def swap_params(self, ids):
        """Remplace en cours d'épisode la masse, le frottement, le COM et les gains (évaluation seulement).

        L'échelle et la forme sont conservées pour ne pas déplacer la surface sous les doigts.
        """
        ids = np.asarray(ids)
        for i in ids:
            rng = stream(self.seed, self.env_ids[i], StreamPurpose.SWAP, self.ticks[i])
            fresh = randomize(self.config, rng, self.distribution)
            self.params.mass[i] = fresh.mass[0]
            self.params.friction[i] = fresh.friction[0]
            self.params.com_offset[i] = fresh.com_offset[0]
            self.params.kp[i] = fresh.kp[0]
            self.params.kd[i] = fresh.kd[0]
        if len(ids):
            logger.debug(f"Object parameters swapped for {len(ids)} env(s)")

    def _noise(self):
        draws = stream_uniform(self.seed, self.env_ids, StreamPurpose.NOISE, self.ticks, NUM_JOINTS)
        return self.config.joint_noise * draws

    def observation(self, pairs=None):
        """Dernières ``pairs`` paires (q_t, a_{t-1}) : bloc des q puis bloc des actions."""
        pairs = pairs or self.config.obs_pairs
        window = self.history[:, -pairs:]
        return np.concatenate([window[:, :, :NUM_JOINTS].reshape(self.num_envs, -1),
                               window[:, :, NUM_JOINTS:].reshape(self.num_envs, -1)], axis=1)

    def history_window(self, length=None):
        length = length or self.config.history_len
        if length > self.window:
            raise UsageError(f"History window {length} exceeds the stored {self.window} steps")
        return self.history[:, -length:].copy()

    def privileged(self):
        return privileged_vector(self.params, self.state, self.config)

    def _physics(self, targets, draws):
        if self.workers == 1 or self.num_envs < 2 * self.workers:
            return handsim.step_physics(self.state, targets, self.params, self.model, draws,
                                        self.disturbances, self.config.disturbance_prob)
        chunks = np.array_split(np.arange(self.num_envs), self.workers)

        def run(ids):
            return handsim.step_physics(self.state.take(ids), targets[ids], self.params.take(ids), self.model,
                                        draws[ids], self.disturbances, self.config.disturbance_prob)

        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            results = list(pool.map(run, chunks))
        state = self.state.copy()
        for ids, part in zip(chunks, results):
            state.put(ids, part)
        return state

    def step(self, actions):
        """Avance tous les environnements d'un pas de contrôle.

        Args:
            actions (np.ndarray): Cibles PD (N, 16).

        Raises:
            UsageError: Si une action n'est pas finie ou n'a pas la bonne forme.

        Returns:
            tuple: (observations, récompenses, terminés, StepInfo)
        """
        actions = np.asarray(actions, dtype=np.float64)
        if actions.shape != (self.num_envs, NUM_JOINTS):
            raise UsageError(f"Expected actions of shape {(self.num_envs, NUM_JOINTS)}, got {actions.shape}")
        if not np.all(np.isfinite(actions)):
            raise UsageError("Actions must be finite")
        targets = np.clip(actions, self.model.lower, self.model.upper)

        draws = stream_uniform(self.seed, self.env_ids, StreamPurpose.PHYSICS, self.ticks, 2)
        before = self.state
        after = self._physics(targets, draws)
        reward, terms = compute_reward(after, self.q_init, self.config)
        self.state = after
        self.ticks += 1
        self.steps += 1

        contacts = after.contact_active.sum(axis=1)
        self.low_contact = np.where(contacts < 2, self.low_contact + 1, 0)
        dropped = (self.low_contact >= self.config.drop_patience) | (np.linalg.norm(after.center, axis=1) > self.c_max)
        timeout = self.steps >= self.config.episode_len
        cause = np.full(self.num_envs, DoneCause.RUNNING.value)
        cause[timeout] = DoneCause.TIMEOUT.value
        cause[dropped] = DoneCause.DROP.value
        cause[after.fault] = DoneCause.FAULT.value
        reward = np.where(after.fault, 0.0, reward)
        terms = {name: np.where(after.fault, 0.0, value) for name, value in terms.items()}
        done = cause != DoneCause.RUNNING.value

        info = StepInfo(
            privileged=self.privileged(),
            done_cause=cause,
            omega_k=self.config.rotation_sign * after.ang_vel,
            lin_speed=np.linalg.norm(after.lin_vel, axis=1),
            torque_l1=np.sum(np.abs(after.torque), axis=1),
            rotation_increment=self.config.rotation_sign * (after.rotation - before.rotation),
            terms=terms,
            episode_rotation=self.config.rotation_sign * after.rotation,
            episode_length=self.steps.copy(),
        )

        noisy = after.q + self._noise()
        self.history = np.roll(self.history, -1, axis=1)
        self.history[:, -1] = np.concatenate([noisy, targets], axis=1)

        if self.auto_reset and np.any(done):
            self.reset(np.flatnonzero(done))
        return self.observation(), reward, done, info
