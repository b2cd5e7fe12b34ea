"""Fan one root seed out to independent, named sub-seeds."""

import hashlib


def derive_seed(root: int, *parts) -> int:
    key = ":".join([str(int(root)), *map(str, parts)]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1
