"""Epoch containers and the on-disk dataset format.

A dataset directory holds ``manifest.json`` plus one little-endian float64
file per subject with shape (epochs, channels, time), row-major.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError

__all__ = ["AMCI", "HC", "SOURCE", "TARGET", "Epoch", "EpochSet", "write_dataset", "read_dataset"]

AMCI = 1
HC = 0
SOURCE = 0
TARGET = 1

MANIFEST_FORMAT = "gfdann-epochs"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class Epoch:
    samples: np.ndarray  # channels x time, microvolts
    sample_rate: float
    subject_id: int
    group_label: int
    epoch_index: int
    domain_label: int = SOURCE

    @property
    def duration(self) -> float:
        return self.samples.shape[1] / self.sample_rate


@dataclass
class EpochSet:
    """Stacked epochs with per-epoch labels.

    ``data`` has shape (n_epochs, n_channels, n_times).
    """

    data: np.ndarray
    subject: np.ndarray
    group: np.ndarray
    domain: np.ndarray
    epoch_index: np.ndarray
    sample_rate: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        n = self.data.shape[0]
        if self.data.ndim != 3:
            raise DataError(f"epoch data must be (epochs, channels, time), got {self.data.shape}")
        for name in ("subject", "group", "domain", "epoch_index"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            if arr.shape != (n,):
                raise DataError(f"{name} must have one entry per epoch")
            setattr(self, name, arr)
        if self.sample_rate <= 0:
            raise DataError("sample_rate must be positive")

    def __len__(self) -> int:
        return self.data.shape[0]

    def __getitem__(self, i: int) -> Epoch:
        return Epoch(
            samples=self.data[i],
            sample_rate=self.sample_rate,
            subject_id=int(self.subject[i]),
            group_label=int(self.group[i]),
            epoch_index=int(self.epoch_index[i]),
            domain_label=int(self.domain[i]),
        )

    def __iter__(self) -> Iterator[Epoch]:
        return (self[i] for i in range(len(self)))

    @property
    def n_channels(self) -> int:
        return self.data.shape[1]

    @property
    def n_times(self) -> int:
        return self.data.shape[2]

    @property
    def epoch_length(self) -> float:
        return self.n_times / self.sample_rate

    def subjects(self) -> list[int]:
        return sorted(int(s) for s in np.unique(self.subject))

    def subject_groups(self) -> dict[int, int]:
        out = {}
        for s in self.subjects():
            groups = np.unique(self.group[self.subject == s])
            if groups.size != 1:
                raise DataError(f"subject {s} carries mixed group labels")
            out[s] = int(groups[0])
        return out

    def select(self, mask: np.ndarray) -> "EpochSet":
        mask = np.asarray(mask)
        return EpochSet(
            data=self.data[mask],
            subject=self.subject[mask],
            group=self.group[mask],
            domain=self.domain[mask],
            epoch_index=self.epoch_index[mask],
            sample_rate=self.sample_rate,
        )

    def for_subjects(self, subjects: Sequence[int]) -> "EpochSet":
        return self.select(np.isin(self.subject, list(subjects)))

    @staticmethod
    def concatenate(sets: Sequence["EpochSet"]) -> "EpochSet":
        if not sets:
            raise DataError("nothing to concatenate")
        rates = {s.sample_rate for s in sets}
        if len(rates) != 1:
            raise DataError(f"sample rates differ: {sorted(rates)}")
        return EpochSet(
            data=np.concatenate([s.data for s in sets]),
            subject=np.concatenate([s.subject for s in sets]),
            group=np.concatenate([s.group for s in sets]),
            domain=np.concatenate([s.domain for s in sets]),
            epoch_index=np.concatenate([s.epoch_index for s in sets]),
            sample_rate=sets[0].sample_rate,
        )


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_dataset(epochs: EpochSet, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in epochs.subjects():
        sub = epochs.select(epochs.subject == s)
        order = np.argsort(sub.epoch_index, kind="stable")
        fname = f"subject_{s:03d}.f64"
        _atomic_write_bytes(directory / fname, np.ascontiguousarray(sub.data[order], dtype="<f8").tobytes())
        domains = np.unique(sub.domain)
        entries.append(
            {
                "id": s,
                "group": int(sub.group[0]),
                "domain": int(domains[0]) if domains.size == 1 else None,
                "n_epochs": len(sub),
                "sample_rate": float(epochs.sample_rate),
                "channels": epochs.n_channels,
                "n_times": epochs.n_times,
                "file": fname,
            }
        )
    manifest = {"format": MANIFEST_FORMAT, "version": MANIFEST_VERSION, "subjects": entries}
    _atomic_write_bytes(directory / "manifest.json", json.dumps(manifest, indent=2).encode("utf-8"))
    return directory


def read_dataset(directory) -> EpochSet:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"no manifest.json in {directory}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest is not valid JSON: {exc}") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DataError(f"unexpected manifest format {manifest.get('format')!r}")
    parts = []
    for entry in manifest["subjects"]:
        shape = (entry["n_epochs"], entry["channels"], entry["n_times"])
        path = directory / entry["file"]
        if not path.is_file():
            raise DataError(f"missing subject file {path}")
        raw = np.fromfile(path, dtype="<f8")
        if raw.size != int(np.prod(shape)):
            raise DataError(f"{path.name}: expected {np.prod(shape)} values, found {raw.size}")
        n = shape[0]
        domain = entry.get("domain")
        parts.append(
            EpochSet(
                data=raw.reshape(shape).astype(np.float64),
                subject=np.full(n, entry["id"]),
                group=np.full(n, entry["group"]),
                domain=np.full(n, SOURCE if domain is None else domain),
                epoch_index=np.arange(n),
                sample_rate=float(entry["sample_rate"]),
            )
        )
    return EpochSet.concatenate(parts)
