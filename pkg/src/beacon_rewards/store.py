"""Append-only CSV ledger keyed by (epoch, validator_index)."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Iterable, Optional

ROWS_HEADER = (
    "epoch,validator_index,effective_balance,flag_source,flag_target,flag_head,"
    "att_reward,att_penalty,att_max,in_sync,sync_reward,sync_max,proposed,"
    "missed_proposals,proposer_reward,el_reward,entity"
)
BLOCKS_HEADER = "slot,epoch,proposer_index,proposed,el_tips,proposer_reward,entity"
SLASHINGS_HEADER = (
    "epoch,slot,validator_index,penalty,proposer_index,proposer_reward,"
    "whistleblower_index,whistleblower_reward"
)


class StoreConflict(Exception):
    """An epoch was re-indexed with different content."""


@dataclass(frozen=True)
class ValidatorEpochRow:
    epoch: int
    validator_index: int
    effective_balance: int
    flag_source: bool
    flag_target: bool
    flag_head: bool
    att_reward: int
    att_penalty: int
    att_max: int
    in_sync: bool
    sync_reward: int
    sync_max: int
    proposed: int
    missed_proposals: int
    proposer_reward: int
    el_reward: int
    entity: str

    @property
    def flag_bits(self) -> int:
        return int(self.flag_source) | int(self.flag_target) << 1 | int(self.flag_head) << 2

    @property
    def achieved(self) -> int:
        """Attestation plus positive sync reward; the MER numerator."""
        return self.att_reward + max(self.sync_reward, 0)

    @property
    def maximum(self) -> int:
        return self.att_max + self.sync_max


@dataclass(frozen=True)
class BlockRow:
    slot: int
    epoch: int
    proposer_index: int
    proposed: bool
    el_tips: int
    proposer_reward: int
    entity: str


@dataclass(frozen=True)
class SlashingRow:
    epoch: int
    slot: int
    validator_index: int
    penalty: int
    proposer_index: int
    proposer_reward: int
    whistleblower_index: int
    whistleblower_reward: int


@dataclass(frozen=True)
class AnalyzerCheckpoint:
    last_fully_indexed_epoch: int
    stream_position: int


def _encode(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    return str(value)


def _decode(cls, record: list[str]):
    out = []
    for f, raw in zip(fields(cls), record):
        if f.type in ("bool", bool):
            out.append(raw == "1")
        elif f.type in ("int", int):
            out.append(int(raw))
        else:
            out.append(raw)
    return cls(*out)


def _lines(records: Iterable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in records:
        w.writerow(_encode(v) for v in astuple(r))
    return buf.getvalue()


class _Table:
    def __init__(self, path: Path, header: str, cls, epoch_of):
        self.path = path
        self.header = header
        self.cls = cls
        self.epoch_of = epoch_of
        self.by_epoch: dict[int, list] = {}

    def load(self) -> None:
        self.by_epoch.clear()
        if not self.path.exists():
            self.path.write_text(self.header + "\n")
            return
        with open(self.path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or ",".join(header) != self.header:
                raise StoreConflict(f"{self.path}: unexpected header")
            for rec in reader:
                row = _decode(self.cls, rec)
                self.by_epoch.setdefault(self.epoch_of(row), []).append(row)

    def rewrite(self) -> None:
        tmp = self.path.with_suffix(".tmp")
        with open(tmp, "w", newline="") as fh:
            fh.write(self.header + "\n")
            for epoch in self.by_epoch:
                fh.write(_lines(self.by_epoch[epoch]))
        os.replace(tmp, self.path)

    def append(self, epoch: int, records: list) -> None:
        with open(self.path, "a", newline="") as fh:
            fh.write(_lines(records))
            fh.flush()
            os.fsync(fh.fileno())
        self.by_epoch[epoch] = list(records)

    def all(self) -> list:
        return [r for rows in self.by_epoch.values() for r in rows]


class Store:
    """Ledger directory: ``rows.csv``, ``blocks.csv``, ``slashings.csv`` and
    ``checkpoint.json``. An epoch counts as committed once its rows are written;
    rows go last so a crash never leaves rows without their blocks."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.rows = _Table(self.directory / "rows.csv", ROWS_HEADER, ValidatorEpochRow, lambda r: r.epoch)
        self.blocks = _Table(self.directory / "blocks.csv", BLOCKS_HEADER, BlockRow, lambda r: r.epoch)
        self.slashings = _Table(self.directory / "slashings.csv", SLASHINGS_HEADER, SlashingRow, lambda r: r.epoch)
        for t in (self.rows, self.blocks, self.slashings):
            t.load()
        committed = set(self.rows.by_epoch)
        for t in (self.blocks, self.slashings):
            orphans = set(t.by_epoch) - committed
            if orphans:
                for e in orphans:
                    del t.by_epoch[e]
                t.rewrite()

    @property
    def epochs(self) -> list[int]:
        return sorted(self.rows.by_epoch)

    def commit_epoch(
        self,
        epoch: int,
        rows: list[ValidatorEpochRow],
        blocks: list[BlockRow],
        slashings: list[SlashingRow],
    ) -> bool:
        """Write one epoch as a batch. Returns False when an identical batch is
        already stored; raises :class:`StoreConflict` if it differs."""
        if epoch in self.rows.by_epoch:
            same = (
                self.rows.by_epoch.get(epoch, []) == rows
                and self.blocks.by_epoch.get(epoch, []) == blocks
                and self.slashings.by_epoch.get(epoch, []) == slashings
            )
            if not same:
                raise StoreConflict(f"epoch {epoch} already stored with different content")
            return False
        keys = [(r.epoch, r.validator_index) for r in rows]
        if len(set(keys)) != len(keys):
            raise StoreConflict(f"epoch {epoch}: duplicate validator rows")
        if blocks:
            self.blocks.append(epoch, blocks)
        if slashings:
            self.slashings.append(epoch, slashings)
        self.rows.append(epoch, rows)
        return True

    def epoch_rows(self, epoch: int) -> list[ValidatorEpochRow]:
        return self.rows.by_epoch.get(epoch, [])

    def all_rows(self) -> list[ValidatorEpochRow]:
        return sorted(self.rows.all(), key=lambda r: (r.epoch, r.validator_index))

    def all_blocks(self) -> list[BlockRow]:
        return sorted(self.blocks.all(), key=lambda b: b.slot)

    def all_slashings(self) -> list[SlashingRow]:
        return sorted(self.slashings.all(), key=lambda s: (s.slot, s.validator_index))

    @property
    def checkpoint_path(self) -> Path:
        return self.directory / "checkpoint.json"

    def read_checkpoint(self) -> Optional[AnalyzerCheckpoint]:
        try:
            data = json.loads(self.checkpoint_path.read_text())
        except FileNotFoundError:
            return None
        return AnalyzerCheckpoint(**data)

    def write_checkpoint(self, checkpoint: AnalyzerCheckpoint) -> None:
        current = self.read_checkpoint()
        if current is not None and checkpoint.last_fully_indexed_epoch < current.last_fully_indexed_epoch:
            return
        tmp = self.checkpoint_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(checkpoint.__dict__, sort_keys=True) + "\n")
        os.replace(tmp, self.checkpoint_path)

    def digest(self) -> str:
        """Hash of the ledger content, independent of commit order."""
        h = hashlib.sha256()
        for name, records in (
            ("rows", self.all_rows()),
            ("blocks", self.all_blocks()),
            ("slashings", self.all_slashings()),
        ):
            h.update(name.encode())
            h.update(_lines(records).encode())
        return h.hexdigest()
