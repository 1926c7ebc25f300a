"""Content fingerprints and deterministic seed derivation."""
import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Any, Union


def _canonical(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {k: _canonical(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in sorted(obj.items(), key=lambda kv: str(kv[0]))}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, float):
        return repr(obj)
    return obj


def fingerprint(*parts: Any) -> str:
    """Return a sha256 hex digest over the canonical JSON of ``parts``."""
    payload = json.dumps([_canonical(p) for p in parts], sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def derive_seed(base_seed: int, *path: Union[str, int]) -> int:
    """
    Expand a top-level seed into a stage/member seed.

    The seed for ``(base, "teacher", "csrec_m", k)`` depends only on those
    values, so adding member ``k + 1`` never changes member ``k``.
    """
    key = ":".join([str(int(base_seed))] + [str(p) for p in path])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF


def file_sha256(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
