"""
Évaluation des variantes de politique, enregistrement de la référence
périodique, export des traces d'extrinsèques et sondes linéaires.
"""
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr
from sklearn.linear_model import LinearRegression
from sklearn.metrics import r2_score
from sklearn.model_selection import KFold, cross_val_predict

from rotlab.utils import crud
from rotlab.utils.error_manage import SimulationFault, ValidationError
from rotation import nets
from rotation.envgym import EnvConfig, RotationEnv
from rotation.handsim import TRAJECTORY_COLUMNS, trajectory_row
from rotation.models import Distribution, DoneCause, PolicyVariant, VariantTag

logger = logging.getLogger(__name__)

METRICS = ('ttf', 'rotr', 'rotations', 'objvel', 'torque')
EPISODE_COLUMNS = ['variant', 'distribution', 'seed', 'env', 'episode', 'cause', 'steps',
                   'mass', 'scale', 'friction', 'lobes'] + list(METRICS)
AGGREGATE_COLUMNS = ['variant', 'distribution', 'metric', 'mean', 'std', 'seeds', 'episodes']


@dataclass
class EpisodeMetrics:
    ttf: float
    rotr: float
    rotations: float
    objvel: float
    torque: float

    def to_dict(self):
        return asdict(self)


@dataclass
class EpisodeTrace:
    """Grandeurs par pas de contrôle d'un épisode."""
    omega_k: list = field(default_factory=list)
    lin_speed: list = field(default_factory=list)
    torque_l1: list = field(default_factory=list)
    rotation_increment: list = field(default_factory=list)
    cause: int = DoneCause.RUNNING.value

    def append(self, omega_k, lin_speed, torque_l1, rotation_increment):
        self.omega_k.append(float(omega_k))
        self.lin_speed.append(float(lin_speed))
        self.torque_l1.append(float(torque_l1))
        self.rotation_increment.append(float(rotation_increment))

    def __len__(self):
        return len(self.omega_k)


def compute_metrics(trace, episode_len):
    """Métriques d'un épisode.

    Args:
        trace (EpisodeTrace): Au moins un pas.
        episode_len (int): Longueur maximale d'épisode.

    Returns:
        EpisodeMetrics: TTF normalisé, somme de omega.k, rotation nette, vitesse x100, couple l1 moyen.
    """
    if len(trace) == 0:
        raise ValidationError("An episode needs at least one control step", field='trace')
    return EpisodeMetrics(
        ttf=min(len(trace) / episode_len, 1.0),
        rotr=float(np.sum(trace.omega_k)),
        rotations=float(abs(np.sum(trace.rotation_increment))),
        objvel=float(np.mean(trace.lin_speed) * 100.0),
        torque=float(np.mean(trace.torque_l1)),
    )


@dataclass
class VariantSpec:
    tag: VariantTag
    bundle_dir: Path = None
    periodic_path: Path = None
    obs_pairs: int = 3

    @property
    def label(self):
        if self.tag is VariantTag.DR_MLP:
            return f"dr_mlp_T{self.obs_pairs}"
        return self.tag.value

    def required_artifacts(self):
        if self.tag is VariantTag.PERIODIC:
            return {'periodic': self.periodic_path}
        return {'bundle': self.bundle_dir}

    def check(self):
        erreurs = {name: "required" for name, value in self.required_artifacts().items() if value is None}
        for name, value in self.required_artifacts().items():
            if value is not None and not Path(value).exists():
                erreurs[name] = f"not found: {value}"
        if erreurs:
            raise ValidationError(f"Missing artifact for variant {self.label}", field='variant', details=erreurs)

    @classmethod
    def parse(cls, label, bundle_dir=None, periodic_path=None):
        """Accepte expert, ours, sysid, noadapt, periodic ou dr_mlp_T<k>."""
        if label.startswith('dr_mlp'):
            pairs = label.partition('_T')[2]
            return cls(VariantTag.DR_MLP, bundle_dir, periodic_path, int(pairs) if pairs else 3)
        try:
            return cls(VariantTag(label), bundle_dir, periodic_path)
        except ValueError as e:
            raise ValidationError(f"Unknown variant: {label}", field='variant') from e


class PrivilegedController:
    def __init__(self, bundle):
        self.bundle = bundle

    def act(self, env, obs):
        z = nets.encode_extrinsics(self.bundle, env.privileged())
        return nets.policy_act(self.bundle, obs, z)[0], z


class AdaptiveController:
    """Politique avec extrinsèques estimées ; ``freeze`` fige l'estimation après la première fenêtre."""

    def __init__(self, bundle, freeze=False):
        if bundle.adaptation is None:
            raise ValidationError("Bundle has no adaptation module; run train_adapt first", field='bundle')
        self.bundle = bundle
        self.freeze = freeze
        self.frozen = None
        self.has_frozen = None

    def act(self, env, obs):
        z = nets.adapt_estimate(self.bundle, env.history_window(self.bundle.history_len))
        if self.freeze:
            if self.frozen is None:
                self.frozen = np.zeros_like(z)
                self.has_frozen = np.zeros(env.num_envs, dtype=bool)
            self.has_frozen[env.steps == 0] = False
            capture = (env.steps == self.bundle.history_len) & ~self.has_frozen
            self.frozen[capture] = z[capture]
            self.has_frozen |= capture
            z = np.where(self.has_frozen[:, None], self.frozen, z)
        return nets.policy_act(self.bundle, obs, z)[0], z


class BlindController:
    def __init__(self, bundle):
        self.bundle = bundle

    def act(self, env, obs):
        return nets.policy_act(self.bundle, obs)[0], None


class PeriodicController:
    """Rejoue une séquence d'actions en boucle ouverte, en reprenant au début après la fin."""

    def __init__(self, actions):
        self.actions = np.asarray(actions, dtype=np.float64)

    def act(self, env, obs):
        return self.actions[env.steps % len(self.actions)], None


def build_controller(spec, bundle=None):
    spec.check()
    if spec.tag is VariantTag.PERIODIC:
        return PeriodicController(crud.read_action_sequence(spec.periodic_path))
    bundle = bundle or crud.load_bundle(spec.bundle_dir)
    expected = {VariantTag.EXPERT: PolicyVariant.RMA, VariantTag.OURS: PolicyVariant.RMA,
                VariantTag.NOADAPT: PolicyVariant.RMA, VariantTag.SYSID: PolicyVariant.SYSID,
                VariantTag.DR_MLP: PolicyVariant.DR}[spec.tag]
    if bundle.variant is not expected:
        raise ValidationError(f"Variant {spec.label} needs a {expected.value} bundle, got {bundle.variant.value}",
                              field='bundle')
    if spec.tag is VariantTag.EXPERT:
        return PrivilegedController(bundle)
    if spec.tag is VariantTag.DR_MLP:
        if bundle.obs_pairs != spec.obs_pairs:
            raise ValidationError(f"Bundle observes {bundle.obs_pairs} pairs, variant asks {spec.obs_pairs}",
                                  field='obs_pairs')
        return BlindController(bundle)
    return AdaptiveController(bundle, freeze=spec.tag is VariantTag.NOADAPT)


def run_episodes(env, controller, episodes, on_step=None):
    """Joue jusqu'à ce que chaque environnement ait terminé le même nombre d'épisodes.

    Returns:
        list: (env, indice d'épisode, EpisodeTrace, paramètres) dans l'ordre (épisode, env).
    """
    per_env = int(np.ceil(episodes / env.num_envs))
    traces = [EpisodeTrace() for _ in range(env.num_envs)]
    snapshots = [_param_snapshot(env, i) for i in range(env.num_envs)]
    done_count = np.zeros(env.num_envs, dtype=np.int64)
    finished = []
    obs = env.observation()
    while np.any(done_count < per_env):
        actions, z = controller.act(env, obs)
        if on_step is not None:
            on_step(env, z, done_count < per_env)
        obs, _, done, info = env.step(actions)
        for i in range(env.num_envs):
            if done_count[i] >= per_env:
                continue
            traces[i].append(info.omega_k[i], info.lin_speed[i], info.torque_l1[i], info.rotation_increment[i])
            if done[i]:
                traces[i].cause = int(info.done_cause[i])
                finished.append((i, int(done_count[i]), traces[i], snapshots[i]))
                done_count[i] += 1
                traces[i] = EpisodeTrace()
                snapshots[i] = _param_snapshot(env, i)
    finished.sort(key=lambda item: (item[1], item[0]))
    return finished[:episodes]


def _param_snapshot(env, i):
    return {'mass': float(env.params.mass[i]), 'scale': float(env.params.scale[i]),
            'friction': float(env.params.friction[i]), 'lobes': int(env.params.lobe_m[i])}


def aggregate(rows):
    """Moyenne par graine puis moyenne et écart-type entre graines, pour chaque métrique.

    Les épisodes en défaut de simulation sont exclus.
    """
    rows = [r for r in rows if int(r['cause']) != DoneCause.FAULT.value]
    seeds = sorted({int(r['seed']) for r in rows})
    result = {}
    for metric in METRICS:
        per_seed = [np.mean([float(r[metric]) for r in rows if int(r['seed']) == s]) for s in seeds]
        result[metric] = {'mean': float(np.mean(per_seed)) if per_seed else float('nan'),
                          'std': float(np.std(per_seed)) if per_seed else float('nan'),
                          'seeds': len(seeds), 'episodes': len(rows)}
    return result


def evaluate(spec, config, cache, distribution, episodes, seeds, out_dir=None, workers=1, bundle=None):
    """Évalue une variante sur une distribution, pour chaque graine.

    Args:
        spec (VariantSpec): La variante.
        config (dict): Configuration à plat.
        cache (GraspCache): Prises initiales.
        distribution (Distribution): TRAIN ou OOD.
        episodes (int): Épisodes par graine.
        seeds (list): Graines distinctes.
        out_dir (Path, optional): Dossier des CSV par épisode et agrégés.
        workers (int, optional): Threads de simulation. Defaults to 1.
        bundle (PolicyBundle, optional): Bundle déjà chargé.

    Raises:
        ValidationError: Si un artefact manque ou si les graines se répètent.

    Returns:
        tuple: (agrégats par métrique, lignes par épisode)
    """
    if len(set(seeds)) != len(seeds):
        raise ValidationError("Evaluation seeds must be distinct", field='seeds')
    distribution = Distribution(distribution)
    controller = build_controller(spec, bundle)
    obs_pairs = spec.obs_pairs if spec.tag is VariantTag.DR_MLP else 3
    rows = []
    for seed in seeds:
        env_config = EnvConfig.from_config(config, seed=seed, obs_pairs=obs_pairs,
                                           num_envs=min(config['num_envs'], episodes))
        env = RotationEnv(env_config, cache, distribution=distribution, workers=workers, evaluation=True)
        env.reset()
        if isinstance(controller, AdaptiveController):
            controller.frozen = None
        for env_id, episode, trace, params in run_episodes(env, controller, episodes):
            metrics = compute_metrics(trace, env_config.episode_len)
            rows.append({'variant': spec.label, 'distribution': distribution.value, 'seed': seed, 'env': env_id,
                         'episode': episode, 'cause': trace.cause, 'steps': len(trace), **params,
                         **metrics.to_dict()})
        logger.info(f"Evaluation {spec.label}/{distribution.value} seed {seed}: {episodes} episodes done")
    table = aggregate(rows)
    if out_dir:
        out_dir = Path(out_dir)
        crud.write_csv(out_dir / f'episodes_{spec.label}_{distribution.value}.csv', EPISODE_COLUMNS, rows)
        crud.write_csv(out_dir / f'aggregate_{spec.label}_{distribution.value}.csv', AGGREGATE_COLUMNS,
                       [{'variant': spec.label, 'distribution': distribution.value, 'metric': m, **v}
                        for m, v in table.items()])
    return table, rows


def make_periodic(bundle, config, cache, seed=0, retries=10):
    """Enregistre un épisode de l'expert (actions moyennes, paramètres nominaux, sans perturbation).

    Raises:
        SimulationFault: Si l'expert lâche l'objet à chaque tentative.

    Returns:
        tuple: (actions (L, 16), graine retenue)
    """
    controller = PrivilegedController(bundle)
    for attempt in range(retries):
        env_config = EnvConfig.from_config(config, seed=seed + attempt, num_envs=1, randomize=False)
        env = RotationEnv(env_config, cache, workers=1, auto_reset=False, disturbances=False)
        obs = env.reset()
        actions = []
        for _ in range(env_config.episode_len):
            action, _ = controller.act(env, obs)
            actions.append(action[0])
            obs, _, done, info = env.step(action)
            if done[0]:
                break
        if info.done_cause[0] == DoneCause.TIMEOUT.value:
            logger.info(f"Periodic reference recorded with seed {seed + attempt} ({len(actions)} steps)")
            return np.array(actions), seed + attempt
        logger.warning(f"Expert dropped the object while recording (attempt {attempt + 1}/{retries})")
    raise SimulationFault("Expert dropped the object in every recording attempt",
                          details={'retries': retries, 'seed': seed})


def trace_columns(width, estimate_name):
    return (['episode', 'segment', 't'] + [f'{estimate_name}{i}' for i in range(width)]
            + ['mass', 'scale', 'friction', 'contacts', 'torque_l1'])


def export_traces(spec, config, cache, episodes, seed=0, swap_every=0, distribution=Distribution.TRAIN,
                  out_path=None, workers=1, bundle=None, trajectory_path=None):
    """Une ligne par pas de contrôle : estimation, vérité physique et contacts.

    Args:
        swap_every (int, optional): Remplace l'objet tous les ``swap_every`` pas (0 : jamais).
        trajectory_path (Path, optional): Trajectoire détaillée de l'environnement 0.

    Returns:
        tuple: (colonnes, lignes)
    """
    controller = build_controller(spec, bundle)
    if not isinstance(controller, AdaptiveController):
        raise ValidationError(f"Variant {spec.label} has no extrinsics estimator", field='variant')
    bundle = controller.bundle
    env_config = EnvConfig.from_config(config, seed=seed, num_envs=min(config['num_envs'], episodes))
    env = RotationEnv(env_config, cache, distribution=Distribution(distribution), workers=workers,
                      evaluation=True)
    env.reset()
    estimate_name = 'e' if bundle.variant is PolicyVariant.SYSID else 'z'
    columns = trace_columns(bundle.z_width, estimate_name)
    rows = []
    episode_ids = np.arange(env.num_envs)
    segments = np.zeros(env.num_envs, dtype=np.int64)
    next_episode = [env.num_envs]
    trajectory = []

    def record(env, z, active):
        # un pas 0 après le premier épisode ouvre un nouvel épisode
        for i in np.flatnonzero((env.steps == 0) & (env.episodes > 1)):
            episode_ids[i] = next_episode[0]
            next_episode[0] += 1
            segments[i] = 0
        if swap_every:
            swap = np.flatnonzero(active & (env.steps > 0) & (env.steps % swap_every == 0))
            env.swap_params(swap)
            segments[swap] += 1
        if trajectory_path and active[0]:
            trajectory.append(trajectory_row(float(env.ticks[0]) * env.model.control_dt, env.state, 0))
        contacts = env.state.contact_active.sum(axis=1)
        torque = np.sum(np.abs(env.state.torque), axis=1)
        for i in np.flatnonzero(active):
            rows.append([int(episode_ids[i]), int(segments[i]), int(env.steps[i])] + z[i].tolist()
                        + [float(env.params.mass[i]), float(env.params.scale[i]), float(env.params.friction[i]),
                           int(contacts[i]), float(torque[i])])

    run_episodes(env, controller, episodes, on_step=record)
    if out_path:
        crud.write_csv(out_path, columns, rows)
    if trajectory_path:
        crud.write_csv(trajectory_path, TRAJECTORY_COLUMNS, trajectory)
    logger.info(f"Exported {len(rows)} trace rows for {spec.label}")
    return columns, rows


def _cv_r2(X, y, folds, seed):
    if np.var(y) == 0:
        return float('nan')
    cv = KFold(n_splits=folds, shuffle=True, random_state=seed)
    pred = cross_val_predict(LinearRegression(), X, y, cv=cv)
    return float(r2_score(y, pred))


def probe_extrinsics(rows, width, seed=0, folds=5, min_groups=20):
    """Sonde linéaire des extrinsèques moyennes vers la masse et l'échelle ; corrélation masse / couple.

    Args:
        rows (list): Lignes de trace (voir ``trace_columns``).
        width (int): Largeur de l'estimation.
        seed (int, optional): Graine des plis et du contrôle mélangé. Defaults to 0.

    Raises:
        ValidationError: Si moins de ``min_groups`` tirages de paramètres sont présents.

    Returns:
        dict: R² par validation croisée, contrôles mélangés, Spearman, indicateur de dégénérescence.
    """
    groups = {}
    for row in rows:
        key = (int(float(row[0])), int(float(row[1])))
        groups.setdefault(key, []).append([float(v) for v in row])
    if len(groups) < min_groups:
        raise ValidationError(f"Probe needs at least {min_groups} parameter draws, got {len(groups)}",
                              field='traces')
    table = np.array([np.mean(np.array(g), axis=0) for g in groups.values()])
    X = table[:, 3:3 + width]
    mass, scale = table[:, 3 + width], table[:, 4 + width]
    torque = table[:, 7 + width]
    centered = X - X.mean(axis=0)
    degenerate = bool(np.linalg.matrix_rank(centered) < min(len(X) - 1, width)
                      or np.var(mass) == 0 or np.var(scale) == 0)
    folds = min(folds, len(X))
    rng = np.random.default_rng(seed)
    rho, pvalue = spearmanr(mass, torque)
    result = {
        'groups': len(X),
        'mass_r2': _cv_r2(X, mass, folds, seed),
        'scale_r2': _cv_r2(X, scale, folds, seed),
        'mass_r2_shuffled': _cv_r2(X, rng.permutation(mass), folds, seed),
        'scale_r2_shuffled': _cv_r2(X, rng.permutation(scale), folds, seed),
        'torque_mass_spearman': float(rho),
        'torque_mass_pvalue': float(pvalue),
        'degenerate': degenerate,
    }
    if degenerate:
        logger.warning("Probe inputs are rank-deficient; R² values are not meaningful")
    return result
