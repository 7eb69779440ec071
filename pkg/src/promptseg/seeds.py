"""Deterministic seed derivation and parameter checksums.

The frozen modules (backend, teacher) draw their constants from generators
seeded by (config seed, component tag) so different components never share a
random stream and every run is reproducible.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch


def derive_seed(seed: int, tag: str) -> int:
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def torch_generator(seed: int, tag: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, tag))
    return gen


def tensor_checksum(named_tensors: dict[str, torch.Tensor]) -> str:
    """Order-independent-by-name digest of a set of tensors."""
    h = hashlib.sha256()
    for name in sorted(named_tensors):
        t = named_tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(np.ascontiguousarray(t.numpy()).tobytes())
    return h.hexdigest()
