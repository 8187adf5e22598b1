"""
Entraînement en deux phases.

Phase 1 : PPO conjoint de la politique, de l'encodeur d'extrinsèques et du
critique avec le vecteur privilégié.
Phase 2 : régression itérative, sur les trajectoires de la politique elle-même,
du module d'adaptation vers les extrinsèques produites par l'encodeur figé.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from rotlab.utils import crud
from rotlab.utils.error_manage import TrainingError, UsageError
from rotation import nets
from rotation.envgym import EnvConfig, GraspCache, RotationEnv, stream
from rotation.handsim import NUM_JOINTS, HandModel, canonical_grasp
from rotation.models import Distribution, DoneCause, InputMode, PolicyVariant, StreamPurpose
from rotation.numkit import Adam, clip_by_global_norm, conv_backward, conv_forward, dense_backward, dense_forward

logger = logging.getLogger(__name__)

TRAIN_LOG_COLUMNS = [
    'update', 'policy_loss', 'value_loss', 'entropy', 'approx_kl', 'clip_fraction', 'grad_norm',
    'skipped', 'mean_reward', 'mean_return', 'mean_episode_rotation', 'mean_episode_length',
    'rotation', 'pose', 'torque', 'work', 'linvel', 'mean_omega', 'mean_objvel', 'episodes',
    'drops', 'timeouts', 'faults',
]
ADAPT_LOG_COLUMNS = ['iteration', 'train_loss', 'holdout_mse', 'z_variance', 'samples', 'mean_reward']
REWARD_TERMS = ('rotation', 'pose', 'torque', 'work', 'linvel')


@dataclass
class EpisodeTracker:
    """Cumuls par environnement et épisodes terminés depuis la dernière lecture."""
    num_envs: int
    running_return: np.ndarray = None
    running_rotation: np.ndarray = None
    finished: list = field(default_factory=list)

    def __post_init__(self):
        self.running_return = np.zeros(self.num_envs)
        self.running_rotation = np.zeros(self.num_envs)

    def record(self, reward, done, info):
        self.running_return += reward
        self.running_rotation += info.rotation_increment
        for i in np.flatnonzero(done):
            self.finished.append((self.running_return[i], self.running_rotation[i],
                                  int(info.episode_length[i]), int(info.done_cause[i])))
            self.running_return[i] = 0.0
            self.running_rotation[i] = 0.0

    def drain(self):
        finished, self.finished = self.finished, []
        return finished


@dataclass
class RolloutBuffer:
    obs: np.ndarray
    privileged: np.ndarray
    z: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    causes: np.ndarray
    values: np.ndarray
    last_value: np.ndarray
    valid: np.ndarray
    histories: np.ndarray = None
    z_true: np.ndarray = None
    advantages: np.ndarray = None
    returns: np.ndarray = None
    terms: dict = field(default_factory=dict)
    omega: np.ndarray = None
    objvel: np.ndarray = None

    @property
    def horizon(self):
        return self.rewards.shape[0]

    @property
    def num_envs(self):
        return self.rewards.shape[1]

    def __len__(self):
        return self.rewards.size


@dataclass
class AdaptBatch:
    histories: np.ndarray
    z_true: np.ndarray
    z_pred: np.ndarray

    def __post_init__(self):
        if self.z_true.shape != self.z_pred.shape:
            raise UsageError("Target and estimate widths differ")

    def __len__(self):
        return len(self.z_true)


def action_noise(env, ticks):
    return np.stack([stream(env.seed, int(e), StreamPurpose.ACTION, int(t)).standard_normal(NUM_JOINTS)
                     for e, t in zip(env.env_ids, ticks)])


def collect_rollout(env, bundle, horizon, input_mode, tracker=None, sample=True):
    """Collecte ``horizon`` pas de tous les environnements.

    Args:
        env (RotationEnv): Environnements déjà réinitialisés.
        bundle (PolicyBundle): Les réseaux.
        horizon (int): Nombre de pas par environnement.
        input_mode (InputMode): PRIVILEGED (z = mu(e)), ESTIMATED (z = phi(historique)) ou NONE.
        tracker (EpisodeTracker, optional): Cumuls d'épisodes entre deux collectes.
        sample (bool, optional): Actions tirées (True) ou moyennes. Defaults to True.

    Returns:
        RolloutBuffer: Transitions (horizon, N) ; les pas en défaut sont marqués invalides.
    """
    input_mode = InputMode(input_mode)
    n = env.num_envs
    tracker = tracker or EpisodeTracker(n)
    estimated = input_mode is InputMode.ESTIMATED
    zw = bundle.z_width
    shape = (horizon, n)
    buf = RolloutBuffer(
        obs=np.zeros(shape + (bundle.obs_width,), dtype=np.float32),
        privileged=np.zeros(shape + (nets.PRIVILEGED_WIDTH,), dtype=np.float32),
        z=np.zeros(shape + (zw,), dtype=np.float32),
        actions=np.zeros(shape + (NUM_JOINTS,)), log_probs=np.zeros(shape), rewards=np.zeros(shape),
        dones=np.zeros(shape, dtype=bool), causes=np.zeros(shape, dtype=np.int64), values=np.zeros(shape),
        last_value=np.zeros(n), valid=np.ones(shape, dtype=bool),
        omega=np.zeros(shape), objvel=np.zeros(shape),
        terms={name: np.zeros(shape) for name in REWARD_TERMS},
    )
    if estimated:
        t_len = bundle.history_len
        buf.histories = np.zeros(shape + (t_len, nets.OBS_PAIR_WIDTH), dtype=np.float32)
        buf.z_true = np.zeros(shape + (zw,), dtype=np.float32)

    obs = env.observation(bundle.obs_pairs)
    for t in range(horizon):
        privileged = env.privileged()
        z = None
        if input_mode is InputMode.PRIVILEGED:
            z = nets.encode_extrinsics(bundle, privileged)
        elif estimated:
            window = env.history_window(bundle.history_len)
            z = nets.adapt_estimate(bundle, window)
            buf.histories[t] = window
            buf.z_true[t] = nets.encode_extrinsics(bundle, privileged)

        noise = action_noise(env, env.ticks) if sample else None
        actions, log_probs = nets.policy_act(bundle, obs, z, mode='sample' if sample else 'mean', noise=noise)
        buf.obs[t] = obs
        buf.privileged[t] = privileged
        if z is not None:
            buf.z[t] = z
        buf.actions[t] = actions
        buf.log_probs[t] = log_probs
        buf.values[t] = nets.critic_value(bundle, obs, z)

        obs, reward, done, info = env.step(actions)
        obs = env.observation(bundle.obs_pairs)
        buf.rewards[t] = reward
        buf.dones[t] = done
        buf.causes[t] = info.done_cause
        buf.valid[t] = info.done_cause != DoneCause.FAULT.value
        buf.omega[t] = info.omega_k
        buf.objvel[t] = info.lin_speed
        for name in REWARD_TERMS:
            buf.terms[name][t] = info.terms[name]
        tracker.record(reward, done, info)

    faults = int(np.sum(~buf.valid))
    if faults:
        logger.warning(f"{faults} faulted transition(s) excluded from the batch")
    z_last = None
    if input_mode is InputMode.PRIVILEGED:
        z_last = nets.encode_extrinsics(bundle, env.privileged())
    elif estimated:
        z_last = nets.adapt_estimate(bundle, env.history_window(bundle.history_len))
    buf.last_value = nets.critic_value(bundle, obs, z_last)
    return buf


def compute_gae(rewards, values, dones, last_value, gamma, lam):
    """Avantages GAE et retours ; ``dones[t]`` coupe le bootstrap après le pas t.

    Args:
        rewards (np.ndarray): Récompenses (H, N).
        values (np.ndarray): Valeurs (H, N).
        dones (np.ndarray): Fins d'épisode (H, N).
        last_value (np.ndarray): Valeur après le dernier pas (N,).
        gamma (float): Facteur d'actualisation.
        lam (float): Paramètre lambda de GAE.

    Returns:
        tuple: (avantages, retours), chacun (H, N).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    horizon = rewards.shape[0]
    advantages = np.zeros_like(rewards)
    gae = np.zeros_like(rewards[0])
    for t in reversed(range(horizon)):
        next_value = last_value if t == horizon - 1 else values[t + 1]
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        gae = delta + gamma * lam * nonterminal * gae
        advantages[t] = gae
    return advantages, advantages + values


def normalize_advantages(advantages):
    return (advantages - advantages.mean()) / (advantages.std() + 1e-8)


def surrogate_gradient(advantages, ratio, clip_eps):
    """d(-surrogate)/d(log pi) par échantillon, avant moyenne : -A r si la branche non bornée est retenue."""
    unclipped = ratio * advantages
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantages
    active = unclipped <= clipped
    return -advantages * ratio * active, np.minimum(unclipped, clipped), active


def ppo_update(buffer, bundle, optimizer, hyper, rng):
    """Optimise politique, critique et encodeur sur une collecte.

    Args:
        buffer (RolloutBuffer): Collecte avec avantages et retours déjà calculés.
        bundle (PolicyBundle): Les réseaux (modifiés en place).
        optimizer (Adam): Optimiseur sur [encodeur, politique, critique] + log_std.
        hyper (dict): epochs, minibatches, clip_eps, value_coef, entropy_coef, max_grad_norm.
        rng (np.random.Generator): Mélange des mini-lots.

    Returns:
        dict: Moyennes des pertes et statistiques de la mise à jour.
    """
    if buffer.advantages is None:
        raise UsageError("Advantages must be computed before the PPO update")
    mask = buffer.valid.reshape(-1)
    obs = buffer.obs.reshape(-1, buffer.obs.shape[-1])[mask]
    priv = buffer.privileged.reshape(-1, nets.PRIVILEGED_WIDTH)[mask]
    z_fixed = buffer.z.reshape(-1, buffer.z.shape[-1])[mask]
    actions = buffer.actions.reshape(-1, NUM_JOINTS)[mask]
    old_logp = buffer.log_probs.reshape(-1)[mask]
    returns = buffer.returns.reshape(-1)[mask]
    advantages = normalize_advantages(buffer.advantages.reshape(-1)[mask])

    rma = bundle.variant is PolicyVariant.RMA
    obs_w = bundle.obs_width
    eps = hyper['clip_eps']
    stats = {k: [] for k in ('policy_loss', 'value_loss', 'entropy', 'approx_kl', 'clip_fraction', 'grad_norm')}
    skipped = 0
    count = len(obs)
    for _ in range(hyper['epochs']):
        order = rng.permutation(count)
        for idx in np.array_split(order, hyper['minibatches']):
            if len(idx) == 0:
                continue
            b = len(idx)
            if rma:
                z, enc_cache = dense_forward(bundle.encoder, priv[idx])
            elif bundle.z_width:
                z, enc_cache = z_fixed[idx], None
            else:
                z, enc_cache = None, None
            x = nets.policy_input(bundle, obs[idx], z)
            mean, pol_cache = dense_forward(bundle.policy, x)
            value, val_cache = dense_forward(bundle.critic, x)
            std = np.exp(bundle.log_std)
            logp = nets.log_prob(mean, bundle.log_std, actions[idx])
            ratio = np.exp(logp - old_logp[idx])
            g_logp, surrogate, active = surrogate_gradient(advantages[idx], ratio, eps)
            policy_loss = -float(np.mean(surrogate))
            value_err = value[:, 0] - returns[idx]
            value_loss = float(np.mean(value_err ** 2))
            ent = nets.entropy(bundle.log_std)
            loss = policy_loss + hyper['value_coef'] * value_loss - hyper['entropy_coef'] * ent
            if not np.isfinite(loss):
                skipped += 1
                logger.warning("Non-finite PPO loss, minibatch skipped")
                continue

            g_logp = g_logp / b
            diff = actions[idx] - mean
            g_mean = g_logp[:, None] * diff / std ** 2
            g_log_std = np.sum(g_logp[:, None] * (diff ** 2 / std ** 2 - 1.0), axis=0) - hyper['entropy_coef']
            g_value = (hyper['value_coef'] * 2.0 * value_err / b)[:, None]
            pol_grads, gx_pol = dense_backward(bundle.policy, pol_cache, g_mean)
            val_grads, gx_val = dense_backward(bundle.critic, val_cache, g_value)
            grads = []
            if rma:
                enc_grads, _ = dense_backward(bundle.encoder, enc_cache, gx_pol[:, obs_w:] + gx_val[:, obs_w:])
                grads.extend(enc_grads)
            grads.extend(pol_grads)
            grads.extend(val_grads)
            grads.append(g_log_std.astype(bundle.log_std.dtype))
            grads, norm = clip_by_global_norm(grads, hyper['max_grad_norm'])
            try:
                optimizer.step(grads)
            except TrainingError:
                skipped += 1
                logger.warning("Non-finite PPO gradient, minibatch skipped")
                continue

            stats['policy_loss'].append(policy_loss)
            stats['value_loss'].append(value_loss)
            stats['entropy'].append(ent)
            stats['approx_kl'].append(float(np.mean(old_logp[idx] - logp)))
            stats['clip_fraction'].append(float(np.mean(np.abs(ratio - 1.0) > eps)))
            stats['grad_norm'].append(norm)
    result = {k: (float(np.mean(v)) if v else float('nan')) for k, v in stats.items()}
    result['skipped'] = skipped
    return result


def ppo_optimizer(bundle, lr):
    return Adam([bundle.encoder, bundle.policy, bundle.critic], extra=[bundle.log_std], lr=lr)


def rollout_summary(buffer, finished):
    summary = {name: float(np.mean(buffer.terms[name])) for name in REWARD_TERMS}
    summary['mean_reward'] = float(np.mean(buffer.rewards[buffer.valid]))
    summary['mean_omega'] = float(np.mean(buffer.omega))
    summary['mean_objvel'] = float(np.mean(buffer.objvel) * 100.0)
    summary['episodes'] = len(finished)
    causes = [f[3] for f in finished]
    summary['drops'] = causes.count(DoneCause.DROP.value)
    summary['timeouts'] = causes.count(DoneCause.TIMEOUT.value)
    summary['faults'] = causes.count(DoneCause.FAULT.value)
    summary['mean_return'] = float(np.mean([f[0] for f in finished])) if finished else float('nan')
    summary['mean_episode_rotation'] = float(np.mean([f[1] for f in finished])) if finished else float('nan')
    summary['mean_episode_length'] = float(np.mean([f[2] for f in finished])) if finished else float('nan')
    return summary


def make_env(config, cache, seed, workers=1, distribution=Distribution.TRAIN, num_envs=None, obs_pairs=None):
    overrides = {'seed': seed}
    if num_envs is not None:
        overrides['num_envs'] = num_envs
    if obs_pairs is not None:
        overrides['obs_pairs'] = obs_pairs
    env_config = EnvConfig.from_config(config, **overrides)
    env = RotationEnv(env_config, cache, distribution=distribution, workers=workers)
    env.reset()
    return env


def rest_pose(config):
    lo, hi = config['train_ranges']['scale']
    return canonical_grasp(HandModel(), 0.5 * (lo + hi))


def train_base(config, cache, seed=0, out_dir=None, workers=1, variant=None, obs_pairs=None):
    """Phase 1 : boucle collecte / mise à jour jusqu'au budget de mises à jour.

    Args:
        config (dict): Configuration à plat validée.
        cache (GraspCache): Prises initiales.
        seed (int, optional): Graine. Defaults to 0.
        out_dir (Path, optional): Dossier du journal CSV et des points de contrôle.
        workers (int, optional): Threads de simulation. Defaults to 1.
        variant (PolicyVariant, optional): Par défaut ``config['variant']``.
        obs_pairs (int, optional): Paires d'observation (DR-MLP-Tk).

    Raises:
        TrainingError: Si le retour moyen reste sous le plancher trop longtemps.

    Returns:
        tuple: (PolicyBundle expert, lignes du journal)
    """
    variant = PolicyVariant(variant or config['variant'])
    obs_pairs = obs_pairs or config['obs_pairs']
    init_rng = np.random.default_rng([seed, 0])
    shuffle_rng = np.random.default_rng([seed, 1])
    bundle = nets.build_bundle(variant, init_rng, obs_pairs=obs_pairs, init_log_std=config['init_log_std'],
                               rest_pose=rest_pose(config))
    optimizer = ppo_optimizer(bundle, config['lr'])
    env = make_env(config, cache, seed, workers, obs_pairs=obs_pairs)
    tracker = EpisodeTracker(env.num_envs)
    mode = InputMode.NONE if variant is PolicyVariant.DR else InputMode.PRIVILEGED
    log_path = Path(out_dir) / 'train_log.csv' if out_dir else None
    rows, below_floor = [], 0

    for update in range(1, config['max_updates'] + 1):
        buffer = collect_rollout(env, bundle, config['horizon'], mode, tracker)
        buffer.advantages, buffer.returns = compute_gae(buffer.rewards, buffer.values, buffer.dones,
                                                        buffer.last_value, config['gamma'], config['gae_lambda'])
        losses = ppo_update(buffer, bundle, optimizer, config, shuffle_rng)
        row = {'update': update, **losses, **rollout_summary(buffer, tracker.drain())}
        rows.append(row)
        if log_path:
            crud.append_csv_row(log_path, TRAIN_LOG_COLUMNS, row)
        logger.info(f"Update {update}: reward {row['mean_reward']:.4f}, policy {row['policy_loss']:.4f}, "
                    f"value {row['value_loss']:.4f}, omega {row['mean_omega']:.3f}")

        if out_dir and update % config['checkpoint_every'] == 0:
            crud.save_bundle(Path(out_dir) / 'checkpoints' / f'update_{update:05d}', bundle)
        if update % config['eval_every'] == 0:
            recent = [r['mean_return'] for r in rows[-config['eval_every']:] if np.isfinite(r['mean_return'])]
            if recent and np.mean(recent) < config['divergence_floor']:
                below_floor += 1
            else:
                below_floor = 0
            if below_floor >= config['divergence_patience']:
                raise TrainingError("Training diverged: mean return stayed below the floor",
                                    details={'update': update, 'mean_return': float(np.mean(recent)),
                                             'floor': config['divergence_floor']})
    if out_dir:
        crud.save_bundle(Path(out_dir) / 'expert', bundle)
    return bundle, rows


def adaptation_stalled(losses, window=3):
    """Vrai si la perte n'a jamais diminué sur les ``window`` premières itérations."""
    if len(losses) < window:
        return False
    head = losses[:window]
    return all(b >= a for a, b in zip(head[:-1], head[1:]))


def plateaued(losses, tol, patience):
    if len(losses) <= patience:
        return False
    reference = losses[-patience - 1]
    return (reference - losses[-1]) / max(abs(reference), 1e-12) < tol


def regress_adaptation(bundle, optimizer, batch, epochs, batch_size, rng):
    """Quelques époques de régression MSE de phi vers z ; renvoie la perte moyenne."""
    stack = bundle.adaptation
    losses = []
    for _ in range(epochs):
        order = rng.permutation(len(batch))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            pred, cache = conv_forward(stack, batch.histories[idx])
            err = pred - batch.z_true[idx]
            losses.append(float(np.mean(err ** 2)))
            grads, _ = conv_backward(stack, cache, 2.0 * err / err.size)
            optimizer.step(grads)
    return float(np.mean(losses))


def train_adaptation(config, bundle, cache, seed=0, out_dir=None, workers=1, history_len=None):
    """Phase 2 : régression itérative du module d'adaptation sur ses propres trajectoires.

    Raises:
        TrainingError: Si un réseau de phase 1 change, ou si la perte ne décroît pas au départ.

    Returns:
        tuple: (ConvStack entraîné, lignes du journal)
    """
    if bundle.variant is PolicyVariant.DR:
        raise UsageError("The DR variant has no adaptation phase")
    history_len = history_len or config['history_len']
    init_rng = np.random.default_rng([seed, 2])
    split_rng = np.random.default_rng([seed, 3])
    frozen = nets.base_hash(bundle)
    nets.build_adaptation(bundle, init_rng, history_len)
    optimizer = Adam([bundle.adaptation], lr=config['adapt_lr'])
    env = make_env(config, cache, seed, workers)
    log_path = Path(out_dir) / 'adapt_log.csv' if out_dir else None
    rows, losses = [], []

    for iteration in range(1, config['adapt_iterations'] + 1):
        buffer = collect_rollout(env, bundle, config['adapt_horizon'], InputMode.ESTIMATED, sample=False)
        if nets.base_hash(bundle) != frozen:
            raise TrainingError("Phase 1 parameters changed during adaptation training")
        mask = buffer.valid.reshape(-1)
        histories = buffer.histories.reshape((-1,) + buffer.histories.shape[2:])[mask]
        z_true = buffer.z_true.reshape(-1, bundle.z_width)[mask]
        z_pred = buffer.z.reshape(-1, bundle.z_width)[mask]
        order = split_rng.permutation(len(z_true))
        n_hold = max(1, int(len(order) * config['adapt_holdout']))
        hold, train = order[:n_hold], order[n_hold:]
        batch = AdaptBatch(histories[train], z_true[train], z_pred[train])

        train_loss = regress_adaptation(bundle, optimizer, batch, config['adapt_epochs'], config['adapt_batch'],
                                        split_rng)
        holdout_pred, _ = conv_forward(bundle.adaptation, histories[hold])
        holdout_mse = float(np.mean((holdout_pred - z_true[hold]) ** 2))
        variance = float(np.mean(np.var(z_true[hold], axis=0)))
        losses.append(train_loss)
        row = {'iteration': iteration, 'train_loss': train_loss, 'holdout_mse': holdout_mse,
               'z_variance': variance, 'samples': len(train),
               'mean_reward': float(np.mean(buffer.rewards[buffer.valid]))}
        rows.append(row)
        if log_path:
            crud.append_csv_row(log_path, ADAPT_LOG_COLUMNS, row)
        logger.info(f"Adaptation iteration {iteration}: loss {train_loss:.5f}, holdout {holdout_mse:.5f}, "
                    f"z variance {variance:.5f}")

        if adaptation_stalled(losses):
            raise TrainingError("Adaptation loss did not decrease over the first iterations",
                                details={'losses': losses[:3]})
        if plateaued(losses, config['adapt_plateau_tol'], config['adapt_plateau_patience']):
            logger.info(f"Adaptation loss plateaued after {iteration} iterations")
            break
    if out_dir:
        crud.save_bundle(Path(out_dir) / 'bundle', bundle)
    return bundle.adaptation, rows
