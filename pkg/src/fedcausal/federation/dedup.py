"""Duplicate-individual removal across sources using salted one-way digests.

Sources send SHA-256 digests of ``salt || primary key``; the coordinator finds
digests held by more than ``keep_limit`` sources, keeps each on a random subset
of that size and tells the other holders which record indices to drop.
"""

import hashlib
from collections import defaultdict

import numpy as np

from .messages import ProtocolError

DIGEST_BYTES = 32


def public_salt(seed):
    return hashlib.sha256(f"fedcausal-dedup-salt:{int(seed)}".encode()).hexdigest()


def digest(key, salt):
    if isinstance(key, str):
        key = key.encode("utf-8")
    if isinstance(salt, str):
        salt = salt.encode("utf-8")
    return hashlib.sha256(salt + key).digest()


def plan_drops(digests_by_source, keep_limit=1, seed=0):
    """Map ``{source_id: [digest bytes per record]}`` to ``{source_id: [record indices to drop]}``."""
    if keep_limit < 1:
        raise ValueError("keep_limit must be at least 1")
    holders = defaultdict(dict)  # digest -> {source: [indices]}
    for sid in sorted(digests_by_source):
        for i, d in enumerate(digests_by_source[sid]):
            if len(d) != DIGEST_BYTES:
                raise ProtocolError(f"source {sid}: digest of {len(d)} bytes, expected {DIGEST_BYTES}")
            holders[d].setdefault(sid, []).append(i)
    rng = np.random.default_rng(seed)
    drops = defaultdict(list)
    for d in sorted(holders):
        srcs = sorted(holders[d])
        if len(srcs) <= keep_limit:
            continue
        keep = set(rng.choice(srcs, size=keep_limit, replace=False).tolist())
        for sid in srcs:
            if sid not in keep:
                drops[sid].extend(holders[d][sid])
    return {sid: sorted(v) for sid, v in drops.items()}
