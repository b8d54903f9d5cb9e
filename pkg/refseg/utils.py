import hashlib
import json
import zlib

import numpy as np
import torch


def substream(seed, name, *indices):
    """
    Derive an independent 32-bit seed for the named random stream.

    All randomness of a run flows from one master seed through these
    substreams, so ablations sharing a master seed see the same data order.
    """
    key = (zlib.crc32(name.encode("utf-8")),) + tuple(int(i) for i in indices)
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return int(sequence.generate_state(1)[0])


def make_rng(seed, name=None, *indices):
    if name is not None:
        seed = substream(seed, name, *indices)
    return np.random.default_rng(seed)


def make_generator(seed, name=None, *indices):
    if name is not None:
        seed = substream(seed, name, *indices)
    generator = torch.Generator()
    generator.manual_seed(seed)
    return generator


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj):
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def array_hash(array):
    array = np.ascontiguousarray(array)
    digest = hashlib.sha1(str(array.shape).encode("utf-8"))
    digest.update(array.tobytes())
    return digest.hexdigest()


def file_hash(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(2**16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def to_tensor(array):
    """H×W (or C×H×W) numpy raster -> float64 tensor with a channel axis."""
    tensor = torch.as_tensor(np.asarray(array, dtype=np.float64))
    if tensor.ndim == 2:
        tensor = tensor.unsqueeze(0)
    return tensor


def set_num_threads(num_threads):
    torch.set_num_threads(max(int(num_threads), 1))
