import hashlib


def derive_seed(base: int, *parts) -> int:
    """Stable 31-bit seed for one unit of work, independent of iteration order."""
    key = ":".join([str(base), *(str(p) for p in parts)])
    return int(hashlib.sha256(key.encode("utf-8")).hexdigest(), 16) & 0x7FFFFFFF


def stable_hash(*parts) -> str:
    key = "\x1f".join(str(p) for p in parts)
    return hashlib.sha256(key.encode("utf-8")).hexdigest()
