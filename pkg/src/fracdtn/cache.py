"""On-disk cache of spectral factorizations.

Entries are keyed by a SHA-256 digest of the grid parameters and the exact
bytes of the local operator matrix. Each entry is a pair of files:
``<key>.bin`` holds eigenvalues then row-major eigenvectors as little-endian
float64, and ``<key>.json`` is the metadata sidecar.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .operator import LocalOperator, SpectralFactorization, spectral_factorization

__all__ = ["cache_dir", "cache_key", "cached_factorization", "clear_cache", "list_cache"]

FORMAT = "fracdtn.eigh/1"


def cache_dir() -> Path:
    env = os.environ.get("FRACDTN_CACHE_DIR")
    if env:
        return Path(env)
    return Path(os.environ.get("XDG_CACHE_HOME", Path.home() / ".cache")) / "fracdtn"


def cache_key(L: LocalOperator) -> str:
    g = L.grid
    h = hashlib.sha256()
    h.update(f"{FORMAT}|n={g.n}|R={g.R!r}|m={g.m}|ghost=zero|".encode())
    h.update(np.ascontiguousarray(L.matrix, dtype="<f8").tobytes())
    return h.hexdigest()


def _read(root: Path, key: str, size: int) -> SpectralFactorization | None:
    meta_path, bin_path = root / f"{key}.json", root / f"{key}.bin"
    if not (meta_path.exists() and bin_path.exists()):
        return None
    try:
        meta = json.loads(meta_path.read_text())
        raw = np.frombuffer(bin_path.read_bytes(), dtype="<f8")
    except (OSError, ValueError):
        return None
    if meta.get("format") != FORMAT or meta.get("size") != size or raw.size != size + size * size:
        return None
    lam = raw[:size].astype(float)
    V = raw[size:].reshape(size, size).astype(float)
    lam.setflags(write=False)
    V.setflags(write=False)
    return SpectralFactorization(lam, V)


def _write(root: Path, key: str, L: LocalOperator, fact: SpectralFactorization) -> None:
    root.mkdir(parents=True, exist_ok=True)
    payload = np.concatenate([fact.eigenvalues, fact.eigenvectors.reshape(-1)]).astype("<f8")
    tmp = root / f"{key}.bin.tmp"
    tmp.write_bytes(payload.tobytes())
    tmp.replace(root / f"{key}.bin")
    g = L.grid
    meta = {
        "format": FORMAT,
        "size": int(L.size),
        "grid": {"n": g.n, "R": g.R, "m": g.m},
        "tensor": L.tensor.name if L.tensor is not None else None,
        "layout": "eigenvalues then row-major eigenvectors, <f8",
    }
    (root / f"{key}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def cached_factorization(L: LocalOperator, use_cache: bool = True,
                         root: Path | None = None) -> tuple[SpectralFactorization, bool]:
    """Factorization of ``L`` and whether it came from the cache."""
    if not use_cache:
        return spectral_factorization(L), False
    root = cache_dir() if root is None else Path(root)
    key = cache_key(L)
    hit = _read(root, key, L.size)
    if hit is not None:
        return hit, True
    fact = spectral_factorization(L)
    try:
        _write(root, key, L, fact)
    except OSError:
        pass  # a read-only cache location only costs recomputation
    return fact, False


def list_cache(root: Path | None = None) -> list[dict]:
    root = cache_dir() if root is None else Path(root)
    out = []
    for meta_path in sorted(root.glob("*.json")):
        try:
            meta = json.loads(meta_path.read_text())
        except (OSError, ValueError):
            continue
        bin_path = meta_path.with_suffix(".bin")
        out.append({"key": meta_path.stem, "bytes": bin_path.stat().st_size if bin_path.exists() else 0, **meta})
    return out


def clear_cache(root: Path | None = None) -> int:
    root = cache_dir() if root is None else Path(root)
    removed = 0
    for path in list(root.glob("*.json")) + list(root.glob("*.bin")):
        path.unlink()
        removed += 1
    return removed
