"""Seed derivation and content digests.

Every random stream in a run is derived from one master seed with
``derive_seed(master, *keys)``: the keys are joined into a counter path
(``"7/model/2"``), hashed with BLAKE2b and truncated to 63 bits. The same
path always yields the same seed and distinct paths are independent for
practical purposes.
"""

import hashlib

import numpy as np


def derive_seed(master_seed, *keys):
    path = "/".join(str(k) for k in (int(master_seed),) + keys)
    digest = hashlib.blake2b(path.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


def rng(seed):
    return np.random.default_rng(int(seed))


def array_digest(arr):
    arr = np.ascontiguousarray(arr)
    h = hashlib.sha256()
    h.update(str(arr.dtype).encode())
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def text_digest(text):
    if isinstance(text, str):
        text = text.encode("utf-8")
    return hashlib.sha256(text).hexdigest()
