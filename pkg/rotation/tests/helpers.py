import numpy as np

from rotation import handsim
from rotation.envgym import GraspCache, scale_buckets


def canonical_cache(config, per_bucket=2):
    """Cache construit directement sur les postures canoniques, sans simulation."""
    model = handsim.HandModel()
    lo, hi = config.test_ranges['scale']
    buckets = scale_buckets(lo, hi, config.scale_bucket_step)
    q = np.concatenate([np.tile(handsim.canonical_grasp(model, s), (per_bucket, 1)) for s in buckets])
    return GraspCache(bucket_scales=buckets, bucket_ids=np.repeat(np.arange(len(buckets)), per_bucket),
                      q=q, pose=np.zeros((len(q), 3)))
