"""Bit-exact binary snapshots of rank-local ensemble slices.

File layout (all little-endian)::

    header   magic "XFLT", u32 version, u32 n_flavors, u32 n_phi, u32 n_energy,
             u64 n_theta_local, u64 global_theta_offset, u64 step_index,
             f64 radius, u32 writer_rank, u32 owner_rank
    payload  species, theta, phi, flavor component, then re[E] and im[E] as f64
    trailer  u32 CRC-32 of the payload

The payload order is the in-memory amplitude order with real and imaginary
energy runs interleaved per component, so encoding is a single stack and
byte-swap-free copy on little-endian hosts.  Emission weights and spectra are
not stored; they follow from the run configuration.
"""

from __future__ import annotations

import os
import struct
import threading
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from bulbsim.errors import (
    BadMagicError,
    BadVersionError,
    BulbError,
    ChecksumError,
    StagingError,
    TruncationError,
)
from bulbsim.grid import Grid
from bulbsim.state import Ensemble

MAGIC = b"XFLT"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIIIIQQQdII")
CRC = struct.Struct("<I")
SUFFIX = ".xflt"
MANIFEST_NAME = "manifest.txt"

_f8 = np.dtype("<f8")


@dataclass(frozen=True)
class SnapshotHeader:
    n_flavors: int
    n_phi: int
    n_energy: int
    n_theta_local: int
    global_theta_offset: int
    step_index: int
    radius: float
    writer_rank: int
    owner_rank: int
    format_version: int = FORMAT_VERSION

    @property
    def payload_size(self) -> int:
        return payload_size(self.n_theta_local, self.n_phi, self.n_flavors, self.n_energy)

    def pack(self) -> bytes:
        return HEADER.pack(MAGIC, self.format_version, self.n_flavors, self.n_phi, self.n_energy,
                           self.n_theta_local, self.global_theta_offset, self.step_index, self.radius,
                           self.writer_rank, self.owner_rank)

    @classmethod
    def unpack(cls, data: bytes) -> "SnapshotHeader":
        if len(data) < HEADER.size:
            raise TruncationError(f"snapshot is {len(data)} bytes, shorter than the {HEADER.size}-byte header")
        (magic, version, n_fl, n_phi, n_e, n_t, offset, step, radius, writer,
         owner) = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        if version != FORMAT_VERSION:
            raise BadVersionError(f"unsupported snapshot format version {version}")
        return cls(n_fl, n_phi, n_e, n_t, offset, step, radius, writer, owner, version)


@dataclass(frozen=True)
class Snapshot:
    header: SnapshotHeader
    re: np.ndarray  # (2, n_theta_local, n_phi, n_flavors, n_energy)
    im: np.ndarray

    def to_ensemble(self, grid: Grid, weights: np.ndarray) -> Ensemble:
        """Slice ensemble on ``grid``; ``weights`` covers the full theta range."""
        h = self.header
        if (grid.n_flavors, grid.n_phi, grid.n_energy) != (h.n_flavors, h.n_phi, h.n_energy):
            raise BulbError("snapshot dimensions do not match the grid")
        sl = slice(h.global_theta_offset, h.global_theta_offset + h.n_theta_local)
        return Ensemble(grid, self.re.copy(), self.im.copy(), np.ascontiguousarray(weights[:, :, sl]),
                        h.radius, h.global_theta_offset)


def payload_size(n_theta_local: int, n_phi: int, n_flavors: int, n_energy: int) -> int:
    return 2 * n_theta_local * n_phi * n_flavors * 2 * n_energy * 8


def snapshot_name(step_index: int, owner_rank: int) -> str:
    return f"snap_{step_index:08}_{owner_rank:04}{SUFFIX}"


def crc32(data: bytes) -> int:
    """Standard reflected CRC-32 (polynomial 0xEDB88320)."""
    return zlib.crc32(data) & 0xFFFFFFFF


def make_header(ens: Ensemble, step_index: int, owner_rank: int = 0, writer_rank: int | None = None) -> SnapshotHeader:
    g = ens.grid
    return SnapshotHeader(g.n_flavors, g.n_phi, g.n_energy, ens.n_theta_local, ens.theta_offset, int(step_index),
                          float(ens.r), owner_rank if writer_rank is None else writer_rank, owner_rank)


def encode_payload(re: np.ndarray, im: np.ndarray) -> bytes:
    return np.stack([re, im], axis=4).astype(_f8, copy=False).tobytes()


def encode_snapshot(ens: Ensemble, step_index: int, *, owner_rank: int = 0, writer_rank: int | None = None) -> bytes:
    payload = encode_payload(ens.re, ens.im)
    header = make_header(ens, step_index, owner_rank, writer_rank)
    return header.pack() + payload + CRC.pack(crc32(payload))


def split_snapshot(data: bytes) -> tuple[SnapshotHeader, bytes, int]:
    """Validate framing and checksum; return header, payload and CRC."""
    header = SnapshotHeader.unpack(data)
    expected = HEADER.size + header.payload_size + CRC.size
    if len(data) != expected:
        raise TruncationError(f"snapshot is {len(data)} bytes but its header implies {expected}")
    payload = data[HEADER.size:HEADER.size + header.payload_size]
    (stored,) = CRC.unpack_from(data, HEADER.size + header.payload_size)
    actual = crc32(payload)
    if stored != actual:
        raise ChecksumError(f"payload CRC-32 {actual:#010x} does not match stored {stored:#010x}")
    return header, payload, stored


def decode_snapshot(data: bytes) -> Snapshot:
    header, payload, _ = split_snapshot(data)
    shape = (2, header.n_theta_local, header.n_phi, header.n_flavors, 2, header.n_energy)
    arr = np.frombuffer(payload, dtype=_f8).reshape(shape).astype(np.float64)
    return Snapshot(header, np.ascontiguousarray(arr[:, :, :, :, 0]), np.ascontiguousarray(arr[:, :, :, :, 1]))


def restamp_writer(data: bytes, writer_rank: int) -> bytes:
    """Same snapshot with a different ``writer_rank``; payload and CRC untouched."""
    header = SnapshotHeader.unpack(data)
    return replace(header, writer_rank=writer_rank).pack() + data[HEADER.size:]


def write_atomic(path: Path, data: bytes) -> Path:
    """Write to a temporary sibling and rename, so a valid name never holds a partial file."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        try:
            tmp.unlink()
        except OSError:
            pass
        raise BulbError(f"cannot write snapshot {path}: {exc}") from exc
    return path


def read_snapshot(path) -> Snapshot:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise BulbError(f"cannot read snapshot {path}: {exc}") from exc
    try:
        return decode_snapshot(data)
    except BulbError as exc:
        raise type(exc)(f"{path}: {exc}") from exc


def write_direct(ens: Ensemble, step_index: int, directory, *, rank: int = 0) -> Path:
    data = encode_snapshot(ens, step_index, owner_rank=rank)
    return write_atomic(Path(directory) / snapshot_name(step_index, rank), data)


STAGE_TAG = "snapshot"


def write_staged(ens: Ensemble, step_index: int, stager_rank: int | None, directory, *, rank: int,
                 exchange) -> Path:
    """Forward this rank's snapshot to ``stager_rank``, which writes it.

    Returns the path the stager will write.  A rank that is its own stager
    writes directly.
    """
    if stager_rank is None:
        raise StagingError(f"rank {rank} has no stager to write its snapshot")
    if stager_rank == rank:
        return write_direct(ens, step_index, directory, rank=rank)
    data = encode_snapshot(ens, step_index, owner_rank=rank)
    exchange.send(rank, stager_rank, (STAGE_TAG, step_index), data)
    return Path(directory) / snapshot_name(step_index, rank)


def receive_staged(exchange, stager_rank: int, owners: list[int], step_index: int, directory) -> list[Path]:
    """Stager side: write the snapshots of ``owners`` in ascending owner order."""
    paths = []
    for owner in sorted(owners):
        _, _, data = exchange.recv(stager_rank, src=owner, tag=(STAGE_TAG, step_index))
        header, _, _ = split_snapshot(data)  # transmission check
        if header.owner_rank != owner or header.step_index != step_index:
            raise StagingError(f"stager {stager_rank} got a snapshot for rank {header.owner_rank} "
                               f"step {header.step_index}, expected rank {owner} step {step_index}")
        out = restamp_writer(data, stager_rank)
        paths.append(write_atomic(Path(directory) / snapshot_name(step_index, owner), out))
    return paths


def reassemble(snapshots: list[Snapshot]) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate per-rank snapshots of one step into global amplitude arrays."""
    snaps = sorted(snapshots, key=lambda s: s.header.global_theta_offset)
    expect = 0
    for s in snaps:
        if s.header.global_theta_offset != expect:
            raise BulbError(f"snapshots leave theta bins [{expect}, {s.header.global_theta_offset}) uncovered")
        expect += s.header.n_theta_local
    steps = {s.header.step_index for s in snaps}
    if len(steps) != 1:
        raise BulbError(f"snapshots come from different steps: {sorted(steps)}")
    return (np.concatenate([s.re for s in snaps], axis=1), np.concatenate([s.im for s in snaps], axis=1))


def write_manifest(directory, config_hash: str, files, entries: dict | None = None) -> Path:
    lines = [f"config_hash = {config_hash}"]
    for key, value in (entries or {}).items():
        lines.append(f"{key} = {value}")
    lines += [f"file = {Path(f).name}" for f in sorted(files, key=lambda f: Path(f).name)]
    return write_atomic(Path(directory) / MANIFEST_NAME, ("\n".join(lines) + "\n").encode())


def read_manifest(path) -> dict:
    out: dict = {"file": []}
    for line in Path(path).read_text().splitlines():
        key, _, value = line.partition(" = ")
        if key == "file":
            out["file"].append(value)
        elif key:
            out[key] = value
    return out


def summarize(snapshot: Snapshot) -> dict:
    """Header fields plus summary statistics for ``inspect``."""
    h = snapshot.header
    norms = np.sqrt(np.sum(snapshot.re ** 2 + snapshot.im ** 2, axis=3))
    p0 = snapshot.re[:, :, :, 0, :] ** 2 + snapshot.im[:, :, :, 0, :] ** 2
    info = {f: getattr(h, f) for f in ("format_version", "n_flavors", "n_phi", "n_energy", "n_theta_local",
                                        "global_theta_offset", "step_index", "radius", "writer_rank",
                                        "owner_rank")}
    if norms.size:
        info.update(
            max_norm_deviation=float(np.max(np.abs(norms - 1.0))),
            mean_survival_nu=float(np.mean(p0[0])),
            mean_survival_nubar=float(np.mean(p0[1])),
        )
    return info
