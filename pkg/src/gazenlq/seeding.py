"""Named random substreams derived from one root seed."""

import zlib

import numpy as np
import torch


def substream_seed(root_seed: int, name: str) -> int:
    """Stable 63-bit seed for the substream ``name`` of ``root_seed``."""
    ss = np.random.SeedSequence([int(root_seed), zlib.crc32(name.encode("utf-8"))])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def numpy_rng(root_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(substream_seed(root_seed, name))


def torch_generator(root_seed: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(substream_seed(root_seed, name))
    return g
