"""Content-addressed store for orbit data and result artifacts.

An entry is a ``.npz`` archive named by the sha256 of its key.  Alongside the
arrays it stores a checksum of their bytes and an optional certificate (a
small dict such as the minimum pairwise distance of a separated set).  On
lookup the checksum and a caller supplied certificate check are re-run; an
entry failing either is evicted with a warning and the lookup misses.
"""
from __future__ import annotations

import hashlib
import io
import json
import logging
import os
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .calibration import digest

log = logging.getLogger(__name__)


def _checksum(arrays: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


class Cache:
    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0
        self.evictions = 0

    def path(self, key: dict) -> Path:
        return self.root / f"{digest(key)}.npz"

    def store(self, key: dict, arrays: dict, certificate: Optional[dict] = None) -> Path:
        meta = {"key": key, "checksum": _checksum(arrays), "certificate": certificate or {}}
        buf = io.BytesIO()
        np.savez(buf, __meta__=np.frombuffer(json.dumps(meta, sort_keys=True, default=_plain).encode(), np.uint8),
                 **arrays)
        p = self.path(key)
        tmp = p.with_suffix(".tmp")
        tmp.write_bytes(buf.getvalue())
        os.replace(tmp, p)
        return p

    def _evict(self, p: Path, why: str):
        log.warning("cache entry %s evicted: %s; recomputing", p.name, why)
        self.evictions += 1
        p.unlink(missing_ok=True)

    def lookup(self, key: dict, verify: Optional[Callable[[dict, dict], bool]] = None):
        """(arrays, certificate) or None.  ``verify(arrays, certificate)`` re-checks stored invariants."""
        p = self.path(key)
        if not p.is_file():
            self.misses += 1
            return None
        try:
            with np.load(p) as z:
                meta = json.loads(z["__meta__"].tobytes().decode())
                arrays = {k: z[k] for k in z.files if k != "__meta__"}
        except Exception as e:  # unreadable archive
            self._evict(p, f"unreadable ({e.__class__.__name__})")
            self.misses += 1
            return None
        if meta.get("key") != json.loads(json.dumps(key, sort_keys=True, default=_plain)):
            self._evict(p, "key mismatch")
        elif meta.get("checksum") != _checksum(arrays):
            self._evict(p, "checksum mismatch")
        elif verify is not None and not verify(arrays, meta.get("certificate", {})):
            self._evict(p, "stored certificate failed re-verification")
        else:
            self.hits += 1
            return arrays, meta.get("certificate", {})
        self.misses += 1
        return None

    def get_or_compute(self, key: dict, compute: Callable[[], tuple],
                       verify: Optional[Callable[[dict, dict], bool]] = None):
        """Return cached (arrays, certificate), computing and storing on a miss."""
        hit = self.lookup(key, verify)
        if hit is not None:
            return hit
        arrays, cert = compute()
        self.store(key, arrays, cert)
        return arrays, cert


def _plain(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))
