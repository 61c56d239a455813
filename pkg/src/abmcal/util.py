"""Small shared helpers: seed derivation, hashing, deterministic CSV output."""
from __future__ import annotations

import csv
import hashlib
from pathlib import Path
from typing import Iterable, Sequence


def derive_seed(master_seed: int, *labels: object) -> int:
    """Split ``master_seed`` into a 63-bit child seed named by ``labels``.

    The child is the first 8 bytes (big-endian, top bit cleared) of
    SHA-256 over ``"master:label1:label2..."``.
    """
    key = ":".join([str(int(master_seed))] + [str(x) for x in labels])
    digest = hashlib.sha256(key.encode()).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def fmt(x: float) -> str:
    """Round-trippable float text."""
    return repr(float(x))


def write_rows(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, float) else v for v in row])


def read_rows(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
