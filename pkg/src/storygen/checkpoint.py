"""Parameter checkpoints: npz container mapping parameter path -> float64 array.

Values round-trip bit-exactly; a sha256 over the sorted (path, bytes) pairs
serves as the identity hash used for teacher-immutability checks.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .tensor import Tensor


def save_params(path: str | Path, params: dict[str, Tensor],
                meta: dict | None = None) -> None:
    arrays = {f"param/{k}": v.data for k, v in params.items()}
    if meta is not None:
        arrays["meta/json"] = np.frombuffer(
            json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_params(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns (param arrays keyed by path, meta dict)."""
    out: dict[str, np.ndarray] = {}
    meta: dict = {}
    with np.load(Path(path), allow_pickle=False) as z:
        for key in z.files:
            if key == "meta/json":
                meta = json.loads(bytes(z[key]).decode())
            elif key.startswith("param/"):
                out[key[len("param/"):]] = z[key].astype(np.float64)
    return out, meta


def params_hash(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k].data).tobytes())
    return h.hexdigest()
