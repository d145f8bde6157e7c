"""Named random-number streams derived from one root seed.

Every component draws from its own stream so that, for a fixed root seed,
changing the draw count in one component never perturbs another.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def stream_seed(root_seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(root_seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def np_generator(root_seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(stream_seed(root_seed, name))


def torch_generator(root_seed: int, name: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(stream_seed(root_seed, name))
    return gen
