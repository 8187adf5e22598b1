"""
Simulateur plan d'une main à quatre doigts tournant un objet saisi autour de z.

Chaînes cinématiques planes à 16 articulations pilotées en PD, contacts
pénalisés au bout des doigts avec frottement de Coulomb régularisé (tanh), et
couples de réaction par transposée de la jacobienne : les propriétés de l'objet
s'impriment sur la proprioception.

Tous les tableaux portent une dimension de lot en tête (un environnement par
ligne) ; aucun calcul ne mélange deux lignes, ce qui rend le résultat de chaque
environnement indépendant de la taille du lot et du découpage entre workers.
"""
import logging
from dataclasses import dataclass, fields
from functools import cached_property

import numpy as np

logger = logging.getLogger(__name__)

NUM_FINGERS = 4
JOINTS_PER_FINGER = 4
NUM_JOINTS = NUM_FINGERS * JOINTS_PER_FINGER
NUM_DOF = NUM_JOINTS + 3


@dataclass(frozen=True)
class HandModel:
    """Constantes de la main, des contacts et de l'intégration (unités SI)."""
    base_radius: float = 0.06
    link_lengths: tuple = (0.03, 0.025, 0.02, 0.015)
    joint_lower: tuple = (-1.8, -0.2, -0.2, -0.2)
    joint_upper: tuple = (0.6, 2.0, 1.8, 1.8)
    joint_inertia: float = 1e-3
    joint_damping: float = 0.01
    torque_limit: float = 0.5
    contact_stiffness: float = 500.0
    contact_damping: float = 5.0
    slip_velocity: float = 0.01
    linear_drag: float = 0.05
    angular_drag: float = 0.002
    bias_accel: float = 2.0
    object_radius: float = 0.04
    grasp_curl: float = 1.2
    grasp_squeeze: float = 0.002
    sim_dt: float = 1.0 / 120.0
    control_dt: float = 1.0 / 20.0
    disturbance_decay: float = 0.9
    disturbance_period: float = 0.08

    def __post_init__(self):
        if any(length <= 0 for length in self.link_lengths):
            raise ValueError("Link lengths must be positive")
        if any(lo >= hi for lo, hi in zip(self.joint_lower, self.joint_upper)):
            raise ValueError("Joint limits must be ordered")

    @property
    def substeps(self):
        return int(round(self.control_dt / self.sim_dt))

    @cached_property
    def anchor_angles(self):
        return 2.0 * np.pi * np.arange(NUM_FINGERS) / NUM_FINGERS

    @cached_property
    def anchors(self):
        return self.base_radius * np.stack([np.cos(self.anchor_angles), np.sin(self.anchor_angles)], axis=-1)

    @cached_property
    def headings(self):
        return self.anchor_angles + np.pi

    @cached_property
    def lower(self):
        return np.tile(np.asarray(self.joint_lower, dtype=np.float64), NUM_FINGERS)

    @cached_property
    def upper(self):
        return np.tile(np.asarray(self.joint_upper, dtype=np.float64), NUM_FINGERS)

    @cached_property
    def lengths(self):
        return np.asarray(self.link_lengths, dtype=np.float64)


@dataclass
class PhysParams:
    """Vérité physique randomisée, une ligne par environnement."""
    scale: np.ndarray
    mass: np.ndarray
    friction: np.ndarray
    com_offset: np.ndarray
    kp: np.ndarray
    kd: np.ndarray
    lobe_m: np.ndarray
    lobe_eps: np.ndarray
    disturbance_scale: np.ndarray

    def __len__(self):
        return len(self.scale)

    @classmethod
    def nominal(cls, n, scale=0.78, mass=0.13, friction=1.65, kp=3.0, kd=0.1, disturbance_scale=2.0):
        return cls(scale=np.full(n, scale), mass=np.full(n, mass), friction=np.full(n, friction),
                   com_offset=np.zeros((n, 2)), kp=np.full(n, kp), kd=np.full(n, kd),
                   lobe_m=np.zeros(n, dtype=np.int64), lobe_eps=np.zeros(n),
                   disturbance_scale=np.full(n, disturbance_scale))

    def take(self, ids):
        return PhysParams(**{f.name: getattr(self, f.name)[ids] for f in fields(self)})

    def put(self, ids, other):
        for f in fields(self):
            getattr(self, f.name)[ids] = getattr(other, f.name)

    @staticmethod
    def concat(parts):
        return PhysParams(**{f.name: np.concatenate([getattr(p, f.name) for p in parts])
                             for f in fields(PhysParams)})

    def validate(self, model):
        erreurs = {}
        if np.any(self.mass <= 0):
            erreurs['mass'] = "mass must be positive"
        if np.any(self.friction <= 0):
            erreurs['friction'] = "friction must be positive"
        if np.any(self.kp <= 0) or np.any(self.kd <= 0):
            erreurs['gains'] = "PD gains must be positive"
        if np.any(np.linalg.norm(self.com_offset, axis=-1) >= model.object_radius * self.scale):
            erreurs['com_offset'] = "COM offset must stay inside the object"
        return erreurs

    def inertia(self, model):
        return 0.5 * self.mass * (model.object_radius * self.scale) ** 2


@dataclass
class SimState:
    q: np.ndarray
    qd: np.ndarray
    center: np.ndarray
    yaw: np.ndarray
    lin_vel: np.ndarray
    ang_vel: np.ndarray
    disturbance: np.ndarray
    contact_active: np.ndarray
    penetration: np.ndarray
    normal_force: np.ndarray
    tangential_force: np.ndarray
    rotation: np.ndarray
    torque: np.ndarray
    fault: np.ndarray

    def __len__(self):
        return len(self.yaw)

    @classmethod
    def at_rest(cls, q, center=None, yaw=None):
        q = np.array(q, dtype=np.float64)
        n = len(q)
        return cls(q=q, qd=np.zeros_like(q),
                   center=np.zeros((n, 2)) if center is None else np.array(center, dtype=np.float64),
                   yaw=np.zeros(n) if yaw is None else np.array(yaw, dtype=np.float64),
                   lin_vel=np.zeros((n, 2)), ang_vel=np.zeros(n), disturbance=np.zeros((n, 2)),
                   contact_active=np.zeros((n, NUM_FINGERS), dtype=bool),
                   penetration=np.zeros((n, NUM_FINGERS)), normal_force=np.zeros((n, NUM_FINGERS)),
                   tangential_force=np.zeros((n, NUM_FINGERS)), rotation=np.zeros(n),
                   torque=np.zeros_like(q), fault=np.zeros(n, dtype=bool))

    def copy(self):
        return SimState(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def take(self, ids):
        return SimState(**{f.name: getattr(self, f.name)[ids] for f in fields(self)})

    def put(self, ids, other):
        for f in fields(self):
            getattr(self, f.name)[ids] = getattr(other, f.name)

    def finite(self):
        ok = np.ones(len(self), dtype=bool)
        for f in fields(self):
            value = getattr(self, f.name)
            if value.dtype.kind == 'f':
                ok &= np.all(np.isfinite(value.reshape(len(self), -1)), axis=1)
        return ok


@dataclass
class Contacts:
    forces: np.ndarray        # (N, 4, 2) force exercée sur l'objet
    reaction: np.ndarray      # (N, 16) couples de réaction -J^T F
    active: np.ndarray
    penetration: np.ndarray
    normal_force: np.ndarray
    tangential_force: np.ndarray
    normals: np.ndarray
    tangents: np.ndarray
    arms: np.ndarray          # bras de levier depuis le centre de masse
    tip_vel: np.ndarray
    damping_n: np.ndarray
    damping_t: np.ndarray
    stiffness_n: np.ndarray


def perp(v):
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def rotate(v, angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.stack([c * v[..., 0] - s * v[..., 1], s * v[..., 0] + c * v[..., 1]], axis=-1)


def fingertip_fk(model, q):
    """Positions des bouts de doigts et jacobiennes.

    Args:
        model (HandModel): La main.
        q (np.ndarray): Positions articulaires (N, 16).

    Returns:
        tuple: positions (N, 4, 2) et jacobiennes (N, 4, 2, 4) par rapport aux
        articulations du doigt concerné uniquement.
    """
    q = np.asarray(q, dtype=np.float64).reshape(-1, NUM_FINGERS, JOINTS_PER_FINGER)
    angles = model.headings[None, :, None] + np.cumsum(q, axis=-1)
    links = model.lengths * np.stack([np.cos(angles), np.sin(angles)], axis=-1).transpose(3, 0, 1, 2)
    # links : (2, N, 4, 4) segments de chaque doigt
    tips = model.anchors[None] + links.sum(axis=-1).transpose(1, 2, 0)
    # d p / d q_j = somme des segments i >= j tournés de 90 degrés
    tail = np.flip(np.cumsum(np.flip(links, axis=-1), axis=-1), axis=-1)
    jac = np.stack([-tail[1], tail[0]], axis=2)
    return tips, jac


def object_com(state, params):
    return state.center + rotate(params.com_offset, state.yaw)


def surface_radius(model, params, local_angle):
    """Rayon du profil de l'objet (disque ou lobé) dans la direction donnée, repère objet."""
    base = model.object_radius * params.scale[:, None]
    return base * (1.0 + params.lobe_eps[:, None] * np.cos(params.lobe_m[:, None] * local_angle))


def contact_forces(state, params, model, tips, jac, elastic=True):
    """Forces de contact pénalisées sur l'objet et couples de réaction articulaires.

    Sans ressort (``elastic=False``), la force normale se réduit à l'amortissement
    d'approche et le frottement est linéarisé par sa sécante : le contact ne fait
    alors jamais de travail positif.

    Args:
        state (SimState): État courant.
        params (PhysParams): Paramètres physiques.
        model (HandModel): La main.
        tips (np.ndarray): Bouts de doigts (N, 4, 2).
        jac (np.ndarray): Jacobiennes (N, 4, 2, 4).
        elastic (bool, optional): Inclut le ressort de pénalité. Defaults to True.

    Returns:
        Contacts: Forces, couples de réaction, enregistrements de contact et
        coefficients de linéarisation pour l'intégrateur.
    """
    rel = tips - state.center[:, None, :]
    dist = np.maximum(np.linalg.norm(rel, axis=-1), 1e-12)
    normals = -rel / dist[..., None]
    tangents = perp(normals)
    local_angle = np.arctan2(rel[..., 1], rel[..., 0]) - state.yaw[:, None]
    penetration = surface_radius(model, params, local_angle) - dist
    active = penetration > 0

    qd = state.qd.reshape(-1, NUM_FINGERS, JOINTS_PER_FINGER)
    tip_vel = (jac @ qd[..., None])[..., 0]
    arms = tips - object_com(state, params)[:, None, :]
    point_vel = state.lin_vel[:, None, :] + state.ang_vel[:, None, None] * perp(arms)
    v_rel = point_vel - tip_vel
    v_n = np.sum(v_rel * normals, axis=-1)
    slip = np.sum(v_rel * tangents, axis=-1)

    mu = params.friction[:, None]
    stiffness = model.contact_stiffness if elastic else 0.0
    normal_force = np.where(active, stiffness * penetration
                            + model.contact_damping * np.maximum(-v_n, 0.0), 0.0)
    slip_ratio = np.tanh(slip / model.slip_velocity)
    tangential_force = -mu * normal_force * slip_ratio
    if elastic:
        damping_t = mu * normal_force * (1.0 - slip_ratio ** 2) / model.slip_velocity
    else:
        # sécante tanh(s/v)/s, limite 1/v en s = 0
        small = np.abs(slip) < 1e-12
        secant = np.where(small, 1.0 / model.slip_velocity, slip_ratio / np.where(small, 1.0, slip))
        damping_t = mu * normal_force * secant
    forces = normal_force[..., None] * normals + tangential_force[..., None] * tangents
    reaction = -(np.swapaxes(jac, -1, -2) @ forces[..., None])[..., 0].reshape(-1, NUM_JOINTS)

    return Contacts(
        forces=forces, reaction=reaction, active=active,
        penetration=np.where(active, penetration, 0.0), normal_force=normal_force,
        tangential_force=tangential_force, normals=normals, tangents=tangents, arms=arms, tip_vel=tip_vel,
        damping_n=np.where(active & (v_n < 0), model.contact_damping, 0.0),
        damping_t=damping_t,
        stiffness_n=np.where(active, stiffness, 0.0),
    )


def contact_jacobian(jac, arms):
    """G (N, 4, 2, 19) : vitesse relative objet/doigt en fonction des vitesses généralisées."""
    n = jac.shape[0]
    G = np.zeros((n, NUM_FINGERS, 2, NUM_DOF))
    for k in range(NUM_FINGERS):
        G[:, k, :, k * JOINTS_PER_FINGER:(k + 1) * JOINTS_PER_FINGER] = -jac[:, k]
    G[:, :, 0, NUM_JOINTS] = 1.0
    G[:, :, 1, NUM_JOINTS + 1] = 1.0
    G[:, :, :, NUM_JOINTS + 2] = perp(arms)
    return G


def sample_disturbance(state, params, draws, prob=0.25, enabled=True):
    """Tire une nouvelle force de perturbation avec la probabilité donnée.

    Args:
        state (SimState): État courant (force actuelle).
        params (PhysParams): Masse et échelle de perturbation.
        draws (np.ndarray): Uniformes (N, 2) issus du flux de chaque environnement.
        prob (float, optional): Probabilité de re-tirage par pas de contrôle. Defaults to 0.25.
        enabled (bool, optional): Désactive toute perturbation. Defaults to True.

    Returns:
        tuple: (force (N, 2), masque des environnements re-tirés)
    """
    if not enabled:
        return np.zeros_like(state.disturbance), np.zeros(len(state), dtype=bool)
    resample = draws[:, 0] < prob
    angle = 2.0 * np.pi * draws[:, 1]
    magnitude = params.disturbance_scale * params.mass
    fresh = magnitude[:, None] * np.stack([np.cos(angle), np.sin(angle)], axis=-1)
    return np.where(resample[:, None], fresh, state.disturbance), resample


def decay_disturbance(force, elapsed, model):
    return force * model.disturbance_decay ** (elapsed / model.disturbance_period)


def kinetic_energy(state, params, model):
    joints = 0.5 * model.joint_inertia * np.sum(state.qd ** 2, axis=-1)
    linear = 0.5 * params.mass * np.sum(state.lin_vel ** 2, axis=-1)
    angular = 0.5 * params.inertia(model) * state.ang_vel ** 2
    return joints + linear + angular


def _substep(state, targets, params, model, passive, bias):
    dt = model.sim_dt
    n = len(state)
    tips, jac = fingertip_fk(model, state.q)
    contacts = contact_forces(state, params, model, tips, jac, elastic=not passive)

    if passive:
        tau = np.zeros_like(state.q)
        kp_eff = kd_eff = np.zeros_like(state.q)
    else:
        raw = params.kp[:, None] * (targets - state.q) - params.kd[:, None] * state.qd
        tau = np.clip(raw, -model.torque_limit, model.torque_limit)
        unsaturated = np.abs(raw) < model.torque_limit
        kp_eff = params.kp[:, None] * unsaturated
        kd_eff = params.kd[:, None] * unsaturated

    G = contact_jacobian(jac, contacts.arms)
    Gt = np.swapaxes(G, -1, -2)
    nn = contacts.normals[..., :, None] * contacts.normals[..., None, :]
    tt = contacts.tangents[..., :, None] * contacts.tangents[..., None, :]
    W_damp = contacts.damping_n[..., None, None] * nn + contacts.damping_t[..., None, None] * tt
    W_stiff = contacts.stiffness_n[..., None, None] * nn
    D = (Gt @ W_damp @ G).sum(axis=1)
    K = (Gt @ W_stiff @ G).sum(axis=1)
    joints = np.arange(NUM_JOINTS)
    D[:, joints, joints] += kd_eff + model.joint_damping
    D[:, NUM_JOINTS, NUM_JOINTS] += model.linear_drag
    D[:, NUM_JOINTS + 1, NUM_JOINTS + 1] += model.linear_drag
    D[:, NUM_JOINTS + 2, NUM_JOINTS + 2] += model.angular_drag
    K[:, joints, joints] += kp_eff

    mass_diag = np.concatenate([np.full((n, NUM_JOINTS), model.joint_inertia), params.mass[:, None],
                                params.mass[:, None], params.inertia(model)[:, None]], axis=1)
    u = np.concatenate([state.qd, state.lin_vel, state.ang_vel[:, None]], axis=1)

    f = (Gt @ contacts.forces[..., None])[..., 0].sum(axis=1)
    f[:, :NUM_JOINTS] += tau - model.joint_damping * state.qd
    f[:, NUM_JOINTS:NUM_JOINTS + 2] += state.disturbance - model.linear_drag * state.lin_vel
    f[:, NUM_JOINTS + 1] -= bias * params.mass * model.bias_accel
    f[:, NUM_JOINTS + 2] -= model.angular_drag * state.ang_vel

    # Euler linéairement implicite : (M + dt D + dt^2 K) du = dt (f - dt K u)
    A = dt * D + dt * dt * K
    A[:, np.arange(NUM_DOF), np.arange(NUM_DOF)] += mass_diag
    rhs = dt * (f - dt * (K @ u[..., None])[..., 0])
    u_new = u + np.linalg.solve(A, rhs[..., None])[..., 0]

    new = state.copy()
    qd_new = u_new[:, :NUM_JOINTS]
    q_new = state.q + dt * qd_new
    below, above = q_new < model.lower, q_new > model.upper
    q_new = np.clip(q_new, model.lower, model.upper)
    qd_new = np.where(below, np.maximum(qd_new, 0.0), np.where(above, np.minimum(qd_new, 0.0), qd_new))
    new.q, new.qd = q_new, qd_new

    new.lin_vel = u_new[:, NUM_JOINTS:NUM_JOINTS + 2]
    new.ang_vel = u_new[:, NUM_JOINTS + 2]
    com = object_com(state, params) + dt * new.lin_vel
    new.yaw = state.yaw + dt * new.ang_vel
    new.center = com - rotate(params.com_offset, new.yaw)
    new.rotation = state.rotation + dt * new.ang_vel

    new.contact_active = contacts.active
    new.penetration = contacts.penetration
    new.normal_force = contacts.normal_force
    new.tangential_force = contacts.tangential_force
    return new, tau


def step_physics(state, targets, params, model, draws=None, disturbances=True, prob=0.25,
                 passive=False, bias=True):
    """Avance la simulation d'un pas de contrôle (``model.substeps`` sous-pas, cible tenue).

    Args:
        state (SimState): État de départ (non modifié).
        targets (np.ndarray): Cibles PD (N, 16).
        params (PhysParams): Paramètres physiques.
        model (HandModel): La main.
        draws (np.ndarray, optional): Uniformes (N, 2) pour la perturbation. Defaults to None.
        disturbances (bool, optional): Active les perturbations. Defaults to True.
        prob (float, optional): Probabilité de re-tirage par pas de contrôle. Defaults to 0.25.
        passive (bool, optional): Couple moteur nul et contacts sans ressort. Defaults to False.
        bias (bool, optional): Applique la force de biais -y. Defaults to True.

    Returns:
        SimState: Nouvel état ; ``fault`` marque les environnements devenus non finis,
        dont l'état est gelé à sa valeur de départ.
    """
    targets = np.asarray(targets, dtype=np.float64)
    current = state.copy()
    enabled = disturbances and draws is not None
    current.disturbance, resampled = sample_disturbance(
        current, params, draws if draws is not None else np.ones((len(state), 2)), prob, enabled)
    torque_sum = np.zeros_like(state.q)
    faulted = state.fault.copy()
    for _ in range(model.substeps):
        current, tau = _substep(current, targets, params, model, passive, bias)
        torque_sum += tau
        # décroissance entre deux re-tirages
        current.disturbance = np.where(resampled[:, None], current.disturbance,
                                       decay_disturbance(current.disturbance, model.sim_dt, model))
        # un état non fini ne doit pas entrer dans la résolution suivante
        broken = np.flatnonzero(~current.finite())
        if len(broken):
            current.put(broken, state.take(broken))
            faulted[broken] = True
    current.torque = torque_sum / model.substeps

    if np.any(faulted):
        bad = np.flatnonzero(faulted)
        logger.warning(f"Simulation fault in {len(bad)} env(s): {bad[:8].tolist()}")
        frozen = state.take(bad)
        frozen.fault = np.ones(len(bad), dtype=bool)
        current.put(bad, frozen)
    return current


def canonical_grasp(model, scale):
    """Posture de prise canonique : chaque bout de doigt enfoncé de ``grasp_squeeze`` dans le disque.

    Les deux dernières articulations sont fixées à ``grasp_curl`` ; les deux premières
    résolvent analytiquement un bras plan à deux segments.

    Args:
        model (HandModel): La main.
        scale (float): Échelle de l'objet.

    Returns:
        np.ndarray: Positions articulaires (16,).
    """
    lengths = model.lengths
    curl = model.grasp_curl
    tail = (lengths[1] * np.array([1.0, 0.0])
            + lengths[2] * np.array([np.cos(curl), np.sin(curl)])
            + lengths[3] * np.array([np.cos(2 * curl), np.sin(2 * curl)]))
    tail_len = np.linalg.norm(tail)
    tail_angle = np.arctan2(tail[1], tail[0])
    reach = model.base_radius - (model.object_radius * scale - model.grasp_squeeze)
    cos_elbow = (reach ** 2 - lengths[0] ** 2 - tail_len ** 2) / (2 * lengths[0] * tail_len)
    elbow = np.arccos(np.clip(cos_elbow, -1.0, 1.0))
    q0 = -np.arctan2(tail_len * np.sin(elbow), lengths[0] + tail_len * np.cos(elbow))
    finger = np.array([q0, elbow - tail_angle, curl, curl])
    return np.clip(np.tile(finger, NUM_FINGERS), model.lower, model.upper)


def trajectory_row(t, state, index=0):
    """Ligne de trajectoire (t, q[16], cx, cy, theta, omega, contacts, forces) pour un environnement."""
    return ([t] + state.q[index].tolist() + state.center[index].tolist()
            + [float(state.yaw[index]), float(state.ang_vel[index])]
            + state.contact_active[index].astype(int).tolist()
            + state.normal_force[index].tolist() + state.tangential_force[index].tolist())


TRAJECTORY_COLUMNS = (['t'] + [f'q{i}' for i in range(NUM_JOINTS)] + ['cx', 'cy', 'theta', 'omega']
                      + [f'contact{k}' for k in range(NUM_FINGERS)]
                      + [f'normal{k}' for k in range(NUM_FINGERS)]
                      + [f'tangential{k}' for k in range(NUM_FINGERS)])
