"""Reproducibility plumbing: seed derivation, config hashing, output files.

Every output file begins with the same provenance pair (config hash, master
seed) so a result can always be traced to the exact run that produced it.
Outputs deliberately contain no timestamps or environment data: rerunning
with identical arguments must produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import os

from .errors import OutputLockedError

LOCK_NAME = ".fedtickets.lock"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config_doc) -> str:
    """sha256 over the canonical JSON form of a config document."""
    return hashlib.sha256(canonical_json(config_doc).encode()).hexdigest()


def derive_seed(master: int, *parts) -> int:
    """Stable uint64 child seed from a master seed and a label path.

    sha256 keeps the derivation platform-independent and collisions between
    distinct label paths practically impossible.
    """
    h = hashlib.sha256()
    h.update(str(int(master)).encode())
    for p in parts:
        h.update(b"/")
        h.update(str(p).encode())
    return int.from_bytes(h.digest()[:8], "big")


def provenance_lines(cfg_hash: str, seed: int) -> list:
    return [f"# config_hash: {cfg_hash}", f"# seed: {seed}"]


def write_csv(path, header, rows, cfg_hash: str, seed: int) -> None:
    """CSV with leading '#' provenance comments; floats as repr (lossless)."""
    with open(path, "w") as fh:
        for line in provenance_lines(cfg_hash, seed):
            fh.write(line + "\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_csv(path):
    """Parse a provenance CSV back into (meta, header, rows-of-strings)."""
    meta = {}
    header = None
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                key, _, val = line[1:].partition(":")
                meta[key.strip()] = val.strip()
            elif header is None:
                header = line.split(",")
            else:
                rows.append(line.split(","))
    return meta, header, rows


def write_json(path, payload, cfg_hash: str, seed: int) -> None:
    doc = {"meta": {"config_hash": cfg_hash, "seed": seed}}
    doc.update(payload)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_jsonl(path, records, cfg_hash: str, seed: int) -> None:
    """JSON-lines file whose first line is a meta record."""
    with open(path, "w") as fh:
        fh.write(canonical_json({"meta": {"config_hash": cfg_hash, "seed": seed}}) + "\n")
        for rec in records:
            fh.write(canonical_json(rec) + "\n")


class OutputLock:
    """Exclusive marker file preventing two runs writing one directory."""

    def __init__(self, out_dir):
        self.path = os.path.join(out_dir, LOCK_NAME)
        self.fd = None

    def __enter__(self):
        os.makedirs(os.path.dirname(self.path) or ".", exist_ok=True)
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise OutputLockedError(
                f"output directory is locked by another run: {self.path}"
            ) from None
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            self.fd = None
        try:
            os.unlink(self.path)
        except FileNotFoundError:
            pass
        return False
