"""Named sub-seeds derived from one top-level seed."""

import hashlib


def derive_seed(seed: int, *names) -> int:
    """Stable 63-bit seed for ``(seed, *names)``, independent of hash randomization."""
    key = ":".join([str(int(seed))] + [str(n) for n in names]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1
