"""
Bag files, dataset manifests and cross-validation folds.

Bag file layout (little-endian):

    magic    8 bytes   b"OTMILBAG"
    version  uint16    1
    N, D     uint32    instance count, feature dimension
    time     float64
    event    uint8     0 or 1
    features N*D float32, row-major
    crc32    uint32    zlib.crc32 of every preceding byte
"""

import csv
import logging
import math
import os
import struct
import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from src.mil_model import Bag

logger = logging.getLogger(__name__)

MAGIC = b"OTMILBAG"
VERSION = 1
HEADER = struct.Struct("<8sHIIdB")
CHECKSUM = struct.Struct("<I")
FEATURE_DTYPE = np.dtype("<f4")

E_TRUNCATED = "E_TRUNCATED"
E_MAGIC = "E_MAGIC"
E_VERSION = "E_VERSION"
E_LENGTH = "E_LENGTH"
E_CHECKSUM = "E_CHECKSUM"
E_FIELD = "E_FIELD"

MANIFEST_COLUMNS = ("bag_id", "path", "time", "event", "fold", "cohort")


class BagFormatError(ValueError):
    """A bag file failed validation; `code` names the failure."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class ManifestError(ValueError):
    """The manifest is malformed or references missing files."""


class FoldError(ValueError):
    """Too few bags or events for the requested number of folds."""


def encode_bag(bag: Bag) -> bytes:
    """Serialise a bag to the binary layout; features are stored as float32."""
    n, d = bag.features.shape
    body = HEADER.pack(MAGIC, VERSION, n, d, bag.time, int(bag.event))
    body += np.ascontiguousarray(bag.features, dtype=FEATURE_DTYPE).tobytes()
    return body + CHECKSUM.pack(zlib.crc32(body))


def decode_bag(data: bytes, bag_id: str = "bag") -> Bag:
    """
    Parse the binary layout.

    Raises:
        BagFormatError: with code E_TRUNCATED, E_MAGIC, E_VERSION, E_LENGTH, E_CHECKSUM or E_FIELD.
    """
    if len(data) < HEADER.size + CHECKSUM.size:
        raise BagFormatError(E_TRUNCATED, f"{len(data)} bytes is shorter than the {HEADER.size}-byte header")
    magic, version, n, d, time, event = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BagFormatError(E_MAGIC, f"bad magic {magic!r}")
    if version != VERSION:
        raise BagFormatError(E_VERSION, f"unsupported version {version}, expected {VERSION}")
    expected = HEADER.size + n * d * FEATURE_DTYPE.itemsize + CHECKSUM.size
    if len(data) < expected:
        raise BagFormatError(E_TRUNCATED, f"{len(data)} bytes, header declares {expected}")
    if len(data) > expected:
        raise BagFormatError(E_LENGTH, f"{len(data)} bytes, header declares {expected}")
    (stored,) = CHECKSUM.unpack_from(data, expected - CHECKSUM.size)
    if zlib.crc32(data[:expected - CHECKSUM.size]) != stored:
        raise BagFormatError(E_CHECKSUM, "CRC32 mismatch")
    if event not in (0, 1):
        raise BagFormatError(E_FIELD, f"event byte must be 0 or 1, got {event}")
    if n == 0:
        raise BagFormatError(E_FIELD, "bag declares zero instances")
    if not (math.isfinite(time) and time > 0):
        raise BagFormatError(E_FIELD, f"time must be finite and positive, got {time}")
    features = np.frombuffer(data, dtype=FEATURE_DTYPE, count=n * d, offset=HEADER.size).reshape(n, d)
    return Bag(features=features.astype(np.float64), time=time, event=bool(event), bag_id=bag_id)


def write_bag(bag: Bag, path) -> None:
    """
    Write a bag file through an exclusively created temporary file, then move it into place.
    """
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "xb") as handle:
        handle.write(encode_bag(bag))
    os.replace(tmp, path)


def read_bag(path, bag_id: Optional[str] = None) -> Bag:
    path = Path(path)
    return decode_bag(path.read_bytes(), bag_id=bag_id if bag_id is not None else path.stem)


@dataclass(frozen=True)
class ManifestRecord:
    """
    one manifest row.

    Attributes:
        bag_id (str): unique bag identifier.
        path (str): bag file path relative to the manifest directory.
        time (float): survival or censoring time.
        event (bool): event indicator.
        fold (int, optional): fold index, None when unassigned ("-").
        cohort (str): free-form cohort tag.
    """
    bag_id: str
    path: str
    time: float
    event: bool
    fold: Optional[int] = None
    cohort: str = "-"


def write_manifest(records: Sequence[ManifestRecord], path) -> None:
    """UTF-8, tab-separated, one header line."""
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for record in records:
            writer.writerow([record.bag_id, record.path, repr(float(record.time)), int(record.event),
                             "-" if record.fold is None else record.fold, record.cohort])


def read_manifest(path, check_paths: bool = True) -> list:
    """
    Read a manifest written by write_manifest.

    Raises:
        ManifestError: wrong header, malformed row, duplicate bag id or missing bag file.
    """
    path = Path(path)
    records = []
    seen = set()
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle, delimiter="\t")
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_COLUMNS:
            raise ManifestError(f"{path}: header must be {' '.join(MANIFEST_COLUMNS)}")
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestError(f"{path}:{line_no}: expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}")
            bag_id, rel_path, time, event, fold, cohort = row
            try:
                record = ManifestRecord(bag_id=bag_id, path=rel_path, time=float(time), event=_flag(event),
                                        fold=None if fold == "-" else int(fold), cohort=cohort)
            except ValueError as exc:
                raise ManifestError(f"{path}:{line_no}: {exc}") from exc
            if record.bag_id in seen:
                raise ManifestError(f"{path}:{line_no}: duplicate bag id {record.bag_id!r}")
            if check_paths and not (path.parent / record.path).is_file():
                raise ManifestError(f"{path}:{line_no}: bag file {record.path} does not exist")
            seen.add(record.bag_id)
            records.append(record)
    return records


def _flag(value: str) -> bool:
    if value not in ("0", "1"):
        raise ValueError(f"event must be 0 or 1, got {value!r}")
    return value == "1"


def load_bags(manifest_path, records: Optional[Sequence[ManifestRecord]] = None) -> list:
    """Read every bag listed in the manifest; labels come from the manifest row."""
    manifest_path = Path(manifest_path)
    records = records if records is not None else read_manifest(manifest_path)
    bags = []
    for record in records:
        bag = read_bag(manifest_path.parent / record.path, bag_id=record.bag_id)
        bags.append(replace(bag, time=record.time, event=record.event, instance_ids=()))
    return bags


def split_folds(records: Sequence[ManifestRecord], k: int, seed: int) -> list:
    """
    Assign folds balanced in size and in event count.

    Events are shuffled and dealt round-robin over a shuffled fold order; censored bags continue the
    same cycle, so both counts differ by at most one between folds.

    Args:
        records (Sequence[ManifestRecord]): manifest rows.
        k (int): number of folds, >= 2.
        seed (int): shuffling seed.

    Returns:
        list[ManifestRecord]: the records, in input order, with `fold` set.

    Raises:
        FoldError: fewer bags or events than folds.
    """
    if k < 2:
        raise FoldError(f"k must be at least 2, got {k}")
    n_events = sum(record.event for record in records)
    if len(records) < k:
        raise FoldError(f"{len(records)} bags cannot fill {k} folds")
    if n_events < k:
        raise FoldError(f"{n_events} events cannot fill {k} folds")

    rng = np.random.default_rng(seed)
    fold_order = rng.permutation(k)
    events = [i for i, record in enumerate(records) if record.event]
    censored = [i for i, record in enumerate(records) if not record.event]
    dealt = [events[i] for i in rng.permutation(len(events))] + [censored[i] for i in rng.permutation(len(censored))]

    folds = [0] * len(records)
    for position, index in enumerate(dealt):
        folds[index] = int(fold_order[position % k])
    logger.info(f"split {len(records)} bags ({n_events} events) into {k} folds with seed {seed}")
    return [replace(record, fold=fold) for record, fold in zip(records, folds)]
