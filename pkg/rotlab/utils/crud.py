"""
Lecture et écriture des artefacts du laboratoire : points de contrôle
portables, manifeste de bundle, cache de prises, journaux CSV, séquences
d'actions et manifestes d'exécution.
"""
import csv
import hashlib
import json
import logging
import struct
from pathlib import Path

import numpy as np

from rotlab.utils.error_manage import ValidationError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'RLCK'
CHECKPOINT_VERSION = 1
GRASP_MAGIC = b'RLGC'
GRASP_VERSION = 1
GRASP_RECORD = 20
BUNDLE_FORMAT_VERSION = 1
ROLE_FILES = {'encoder': 'encoder.rlck', 'policy': 'policy.rlck', 'critic': 'critic.rlck',
              'adaptation': 'adaptation.rlck'}


def _read_exact(handle, size, path):
    data = handle.read(size)
    if len(data) != size:
        raise ValidationError(f"Truncated file: {path}", field='path')
    return data


def write_checkpoint(path, tensors):
    """Écrit une liste de tenseurs nommés au format portable.

    Args:
        path (Path): Fichier de destination.
        tensors (list): Liste de (nom, étiquette, tableau).

    Returns:
        Path: Le chemin écrit.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, 'wb') as handle:
            handle.write(CHECKPOINT_MAGIC)
            handle.write(struct.pack('<II', CHECKPOINT_VERSION, len(tensors)))
            for name, tag, array in tensors:
                name_b, tag_b = name.encode('utf-8'), tag.encode('utf-8')
                array = np.asarray(array)
                handle.write(struct.pack('<H', len(name_b)) + name_b)
                handle.write(struct.pack('<H', len(tag_b)) + tag_b)
                handle.write(struct.pack('<B', array.ndim))
                handle.write(struct.pack(f'<{array.ndim}I', *array.shape))
            for _, _, array in tensors:
                handle.write(np.ascontiguousarray(array, dtype='<f4').tobytes())
        logger.info(f"Checkpoint written: {path} ({len(tensors)} tensors)")
        return path
    except Exception as e:
        logger.error(f"Error writing checkpoint {path}: {e}")
        raise


def read_checkpoint(path):
    """Relit un point de contrôle portable.

    Raises:
        ValidationError: Si le fichier n'est pas un point de contrôle valide.

    Returns:
        list: Liste de (nom, étiquette, tableau float32).
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"Checkpoint not found: {path}", field='path')
    with open(path, 'rb') as handle:
        if _read_exact(handle, 4, path) != CHECKPOINT_MAGIC:
            raise ValidationError(f"Not a checkpoint file: {path}", field='path')
        version, count = struct.unpack('<II', _read_exact(handle, 8, path))
        if version != CHECKPOINT_VERSION:
            raise ValidationError(f"Unsupported checkpoint version {version}", field='path')
        descriptors = []
        for _ in range(count):
            (n_len,) = struct.unpack('<H', _read_exact(handle, 2, path))
            name = _read_exact(handle, n_len, path).decode('utf-8')
            (t_len,) = struct.unpack('<H', _read_exact(handle, 2, path))
            tag = _read_exact(handle, t_len, path).decode('utf-8')
            (ndim,) = struct.unpack('<B', _read_exact(handle, 1, path))
            shape = struct.unpack(f'<{ndim}I', _read_exact(handle, 4 * ndim, path))
            descriptors.append((name, tag, shape))
        tensors = []
        for name, tag, shape in descriptors:
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(handle, 4 * size, path), dtype='<f4')
            tensors.append((name, tag, data.reshape(shape).astype(np.float32)))
    return tensors


def file_hash(path):
    digest = hashlib.sha256()
    with open(path, 'rb') as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def write_json(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(payload, handle, indent=2, sort_keys=True, default=str)
    return path


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"File not found: {path}", field='path')
    try:
        with open(path, encoding='utf-8') as handle:
            return json.load(handle)
    except json.JSONDecodeError as e:
        raise ValidationError(f"Invalid JSON in {path}: {e}", field='path') from e


def save_bundle(directory, bundle):
    """Écrit chaque rôle du bundle dans son fichier et le manifeste ``bundle.json``."""
    from rotation.nets import bundle_hash

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    roles = {}
    modules = {'encoder': bundle.encoder, 'policy': bundle.policy, 'critic': bundle.critic,
               'adaptation': bundle.adaptation}
    for role, module in modules.items():
        if module is None:
            continue
        tensors = module.to_tensors(role)
        if role == 'policy':
            tensors.append(('policy.log_std', 'logstd', bundle.log_std))
        write_checkpoint(directory / ROLE_FILES[role], tensors)
        roles[role] = ROLE_FILES[role]
    manifest = {
        'format_version': BUNDLE_FORMAT_VERSION,
        'variant': bundle.variant.value,
        'obs_pairs': bundle.obs_pairs,
        'history_len': bundle.history_len,
        'roles': roles,
        'param_hash': bundle_hash(bundle),
    }
    write_json(directory / 'bundle.json', manifest)
    return manifest


def load_bundle(directory, require_adaptation=False):
    """Recharge un bundle écrit par ``save_bundle`` et vérifie son empreinte.

    Raises:
        ValidationError: Si un rôle manque ou si l'empreinte ne correspond pas.

    Returns:
        PolicyBundle: Le bundle rechargé.
    """
    from rotation.models import PolicyVariant
    from rotation.nets import PolicyBundle, bundle_hash
    from rotation.numkit import ConvStack, DenseNet

    directory = Path(directory)
    manifest = read_json(directory / 'bundle.json')
    if manifest.get('format_version') != BUNDLE_FORMAT_VERSION:
        raise ValidationError(f"Unsupported bundle format in {directory}", field='bundle')
    roles = manifest.get('roles', {})
    erreurs = {}
    for role in ('policy', 'critic'):
        if role not in roles:
            erreurs[role] = "missing role"
    if require_adaptation and 'adaptation' not in roles:
        erreurs['adaptation'] = "missing role; run train_adapt first"
    if erreurs:
        raise ValidationError(f"Incomplete bundle in {directory}", field='bundle', details=erreurs)

    policy_tensors = read_checkpoint(directory / roles['policy'])
    log_std = [t for t in policy_tensors if t[1] == 'logstd'][0][2]
    policy = DenseNet.from_tensors([t for t in policy_tensors if t[1] != 'logstd'])
    bundle = PolicyBundle(
        variant=PolicyVariant(manifest['variant']),
        policy=policy,
        log_std=log_std.copy(),
        critic=DenseNet.from_tensors(read_checkpoint(directory / roles['critic'])),
        encoder=DenseNet.from_tensors(read_checkpoint(directory / roles['encoder'])) if 'encoder' in roles else None,
        obs_pairs=manifest.get('obs_pairs', 3),
    )
    if 'adaptation' in roles:
        bundle.adaptation = ConvStack.from_tensors(read_checkpoint(directory / roles['adaptation']),
                                                   manifest['history_len'])
    if bundle_hash(bundle) != manifest.get('param_hash'):
        raise ValidationError(f"Parameter hash mismatch for bundle {directory}", field='param_hash')
    logger.info(f"Bundle loaded from {directory}: variant {bundle.variant.value}")
    return bundle


def write_grasp_cache(path, cache):
    """Écrit le cache de prises : en-tête puis enregistrements (seau, q[16], cx, cy, theta) float32."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records = np.concatenate([cache.bucket_ids[:, None].astype(np.float64), cache.q, cache.pose], axis=1)
    try:
        with open(path, 'wb') as handle:
            handle.write(GRASP_MAGIC)
            handle.write(struct.pack('<II', GRASP_VERSION, len(cache.bucket_scales)))
            handle.write(np.asarray(cache.bucket_scales, dtype='<f4').tobytes())
            handle.write(struct.pack('<I', len(records)))
            handle.write(np.ascontiguousarray(records, dtype='<f4').tobytes())
        logger.info(f"Grasp cache written: {path} ({len(records)} grasps)")
        return path
    except Exception as e:
        logger.error(f"Error writing grasp cache {path}: {e}")
        raise


def read_grasp_cache(path):
    from rotation.envgym import GraspCache

    path = Path(path)
    if not path.exists():
        raise ValidationError(f"Grasp cache not found: {path}; run gen_grasps first", field='grasps')
    with open(path, 'rb') as handle:
        if _read_exact(handle, 4, path) != GRASP_MAGIC:
            raise ValidationError(f"Not a grasp cache: {path}", field='grasps')
        version, buckets = struct.unpack('<II', _read_exact(handle, 8, path))
        if version != GRASP_VERSION:
            raise ValidationError(f"Unsupported grasp cache version {version}", field='grasps')
        scales = np.frombuffer(_read_exact(handle, 4 * buckets, path), dtype='<f4').astype(np.float64)
        (count,) = struct.unpack('<I', _read_exact(handle, 4, path))
        records = np.frombuffer(_read_exact(handle, 4 * GRASP_RECORD * count, path), dtype='<f4')
    records = records.reshape(count, GRASP_RECORD).astype(np.float64)
    return GraspCache(bucket_scales=np.round(scales, 6), bucket_ids=records[:, 0].astype(np.int64),
                      q=records[:, 1:17], pose=records[:, 17:20])


def export_grasp_csv(path, cache):
    columns = ['bucket', 'scale'] + [f'q{i}' for i in range(16)] + ['cx', 'cy', 'theta']
    rows = []
    for b, q, pose in zip(cache.bucket_ids, cache.q, cache.pose):
        rows.append([int(b), float(cache.bucket_scales[b])] + q.tolist() + pose.tolist())
    return write_csv(path, columns, rows)


def write_csv(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([row.get(c, '') for c in columns] if isinstance(row, dict) else row)
    return path


def append_csv_row(path, columns, row):
    """Ajoute une ligne à un journal CSV, en écrivant l'en-tête à la création."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with open(path, 'a', newline='', encoding='utf-8') as handle:
        writer = csv.writer(handle)
        if new:
            writer.writerow(columns)
        writer.writerow([row.get(c, '') for c in columns])


def read_csv(path):
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"File not found: {path}", field='path')
    with open(path, newline='', encoding='utf-8') as handle:
        return list(csv.DictReader(handle))


def write_action_sequence(path, actions):
    columns = ['step'] + [f'a{i}' for i in range(actions.shape[1])]
    return write_csv(path, columns, [[i] + row.tolist() for i, row in enumerate(actions)])


def read_action_sequence(path):
    rows = read_csv(path)
    if not rows:
        raise ValidationError(f"Empty action sequence: {path}", field='periodic')
    width = len([k for k in rows[0] if k.startswith('a')])
    return np.array([[float(r[f'a{i}']) for i in range(width)] for r in rows])


def write_manifest(directory, manifest):
    return write_json(Path(directory) / 'manifest.json', manifest.to_dict())
