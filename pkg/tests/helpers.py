"""Synthetic feature files with a controlled amount of membership signal."""

import numpy as np

from dynmia.features import FeatureFile


def feature_pair(n, gate_dim=16, num_classes=10, cf_p=(0.5, 0.5), logit_shift=0.0,
                 act_dim=None, grad_dim=None, seed=0, id_offset=0):
    """Members (y=1) and non-members (y=0), ``n`` each.

    Control-flow bits are Bernoulli(cf_p[0]) for members and Bernoulli(cf_p[1])
    for non-members; member logits get ``logit_shift`` added to the true-class
    entry. With the defaults both sides share one distribution.
    """
    rng = np.random.default_rng(seed)
    files = []
    for side, (y, p) in enumerate(zip((1, 0), cf_p)):
        cf = (rng.random((n, gate_dim)) < p).astype(np.uint8)
        logits = rng.standard_normal((n, num_classes)).astype(np.float32)
        if y == 1:
            logits[np.arange(n), rng.integers(0, num_classes, n)] += logit_shift
        act = None if act_dim is None else rng.standard_normal((n, act_dim)).astype(np.float32)
        grad = None if grad_dim is None else rng.standard_normal((n, grad_dim)).astype(np.float32)
        ids = id_offset + side * n + np.arange(n)
        files.append(FeatureFile(ids, cf, logits, np.full(n, y), act, grad))
    return files[0], files[1]
