"""Validator-to-staking-entity resolution through deposit addresses."""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

OTHER = "Other"

DEPOSITS_HEADER = ["validator_index", "deposit_address"]
ENTITIES_HEADER = ["deposit_address", "entity_name"]


class EntityMapError(ValueError):
    pass


def normalize_address(address: str) -> str:
    a = address.strip().lower()
    if not a.startswith("0x"):
        a = "0x" + a
    try:
        int(a[2:] or "x", 16)
    except ValueError:
        raise EntityMapError(f"not a hex address: {address!r}") from None
    return a


@dataclass(frozen=True)
class EntityMap:
    address_entities: Mapping[str, str] = field(default_factory=dict)
    validator_entities: Mapping[int, str] = field(default_factory=dict)

    def resolve(self, validator_index: int) -> str:
        return self.validator_entities.get(validator_index, OTHER)

    def shares(self, validator_count: int) -> dict[str, float]:
        counts: dict[str, int] = {}
        for v in range(validator_count):
            e = self.resolve(v)
            counts[e] = counts.get(e, 0) + 1
        return {e: c / validator_count for e, c in sorted(counts.items())}

    def entities(self) -> list[str]:
        return sorted(set(self.validator_entities.values()) | {OTHER})


def _rows(path: Path, header: list[str]):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        first = next(reader, None)
        if first is None:
            return
        if [c.strip() for c in first] != header:
            raise EntityMapError(f"{path}:1: expected header {','.join(header)}")
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise EntityMapError(f"{path}:{reader.line_num}: expected {len(header)} fields, got {len(row)}")
            yield reader.line_num, [c.strip() for c in row]


def build_map(deposits: str | Path, entities: str | Path) -> EntityMap:
    address_entities: dict[str, str] = {}
    for line, (address, name) in _rows(Path(entities), ENTITIES_HEADER):
        try:
            addr = normalize_address(address)
        except EntityMapError as exc:
            raise EntityMapError(f"{entities}:{line}: {exc}") from None
        if not name:
            raise EntityMapError(f"{entities}:{line}: empty entity name")
        if address_entities.get(addr, name) != name:
            raise EntityMapError(f"{entities}:{line}: address {addr} mapped to two entities")
        address_entities[addr] = name

    validator_entities: dict[int, str] = {}
    for line, (index, address) in _rows(Path(deposits), DEPOSITS_HEADER):
        try:
            v = int(index)
            addr = normalize_address(address)
        except (ValueError, EntityMapError):
            raise EntityMapError(f"{deposits}:{line}: malformed row") from None
        if v < 0:
            raise EntityMapError(f"{deposits}:{line}: negative validator index")
        entity = address_entities.get(addr, OTHER)
        if validator_entities.get(v, entity) != entity:
            raise EntityMapError(f"{deposits}:{line}: validator {v} resolves to two entities")
        validator_entities[v] = entity
    return EntityMap(address_entities, validator_entities)


def write_synthetic(
    directory: str | Path,
    validator_count: int,
    shares: Mapping[str, float],
    seed: int = 0,
    addresses_per_entity: int = 3,
) -> tuple[Path, Path]:
    """Deposit and entity CSVs giving each entity ``round(share * count)``
    randomly chosen validators. Unassigned validators get solo addresses."""
    if sum(shares.values()) > 1.0 + 1e-9:
        raise EntityMapError("entity shares exceed 1")
    rng = random.Random(seed)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    order = list(range(validator_count))
    rng.shuffle(order)

    entity_rows = []
    deposit_rows = []
    pos = 0
    for k, (name, share) in enumerate(sorted(shares.items())):
        n = round(share * validator_count)
        addrs = [f"0x{(k + 1):04x}{i:036x}" for i in range(addresses_per_entity)]
        entity_rows.extend((a, name) for a in addrs)
        for j, v in enumerate(order[pos : pos + n]):
            deposit_rows.append((v, addrs[j % len(addrs)]))
        pos += n
    for v in order[pos:]:
        deposit_rows.append((v, f"0xffff{v:036x}"))
    deposit_rows.sort()

    deposits_path = directory / "deposits.csv"
    entities_path = directory / "entities.csv"
    with open(deposits_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DEPOSITS_HEADER)
        w.writerows(deposit_rows)
    with open(entities_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ENTITIES_HEADER)
        w.writerows(entity_rows)
    return deposits_path, entities_path
