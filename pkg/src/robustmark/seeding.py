"""Stable derivation of per-component RNG streams from one master seed.

Every module derives its own child stream by a string label, so adding or
reordering one component never perturbs another component's randomness.
"""

import hashlib

import torch


def derive_seed(master_seed: int, label: str) -> int:
    """Derive a child seed from (master_seed, label), stable across runs."""
    payload = f"{master_seed}:{label}".encode("utf-8")
    digest = hashlib.sha256(payload).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


def generator(seed: int) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(int(seed))
    return g
