"""Network and entity analytics over the reward ledger, plus report export."""

from __future__ import annotations

import csv
import json
from collections import Counter, defaultdict
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

from .analyzer import compute_mer_ratio
from .entities import OTHER, EntityMap
from .store import BlockRow, Store, ValidatorEpochRow

RowSource = Union[Store, Iterable[ValidatorEpochRow]]
BlockSource = Union[Store, Iterable[BlockRow]]

NETWORK = "network"
REPORTS = (
    "missed_flags",
    "mer_series",
    "missed_blocks",
    "reward_decomposition",
    "proposals_frequency",
    "entity_streaks",
    "mer_per_entity",
    "block_share",
)


class MetricError(ValueError):
    pass


def _rows(source: RowSource) -> list[ValidatorEpochRow]:
    return source.all_rows() if isinstance(source, Store) else list(source)


def _blocks(source: BlockSource) -> list[BlockRow]:
    if isinstance(source, Store):
        return source.all_blocks()
    return sorted(source, key=lambda b: b.slot)


@dataclass(frozen=True)
class EpochSeriesPoint:
    epoch: int
    total: float
    source: float
    target: float
    head: float


def missed_flags_series(store: RowSource) -> list[EpochSeriesPoint]:
    """Per-epoch missed flags over active validators. ``total`` adds the three
    per-flag fractions, so it can exceed 1 in a full outage."""
    per_epoch: dict[int, list[int]] = defaultdict(lambda: [0, 0, 0, 0])
    for r in _rows(store):
        acc = per_epoch[r.epoch]
        acc[0] += 1
        acc[1] += not r.flag_source
        acc[2] += not r.flag_target
        acc[3] += not r.flag_head
    if not per_epoch:
        raise MetricError("no indexed epochs")
    out = []
    for epoch in sorted(per_epoch):
        n, s, t, h = per_epoch[epoch]
        out.append(EpochSeriesPoint(epoch, (s + t + h) / n, s / n, t / n, h / n))
    return out


def mer_series(store: RowSource) -> list[tuple[int, float]]:
    by_epoch: dict[int, list[ValidatorEpochRow]] = defaultdict(list)
    for r in _rows(store):
        by_epoch[r.epoch].append(r)
    return [(e, float(compute_mer_ratio(by_epoch[e]))) for e in sorted(by_epoch)]


@dataclass(frozen=True)
class MissedBlocks:
    before_slots: int
    after_slots: int
    before_count: int
    after_count: int
    before_ratio: float
    after_ratio: float
    reduction: float


def missed_blocks_compare(store: BlockSource, split_epoch: int) -> MissedBlocks:
    """Missed-block ratios before ``split_epoch`` and from it on;
    ``reduction = 1 - after_ratio / before_ratio``."""
    slots = [0, 0]
    missed = [0, 0]
    # counting only, so plain iterables are consumed as they stream
    for b in store.all_blocks() if isinstance(store, Store) else store:
        side = int(b.epoch >= split_epoch)
        slots[side] += 1
        missed[side] += not b.proposed
    if not slots[0] or not slots[1]:
        raise MetricError(f"split epoch {split_epoch} leaves one side empty")
    before = missed[0] / slots[0]
    after = missed[1] / slots[1]
    if missed[0] == 0:
        raise MetricError("no missed blocks before the split; reduction undefined")
    return MissedBlocks(slots[0], slots[1], missed[0], missed[1], before, after, 1 - after / before)


def reward_totals(store: RowSource) -> dict[str, int]:
    totals = {"attestation": 0, "proposer_cl": 0, "sync": 0, "el": 0}
    for r in _rows(store):
        totals["attestation"] += r.att_reward
        totals["proposer_cl"] += r.proposer_reward
        totals["sync"] += max(r.sync_reward, 0)
        totals["el"] += r.el_reward
    return totals


def reward_decomposition(store: RowSource) -> dict[str, float]:
    totals = reward_totals(store)
    grand = sum(totals.values())
    if grand == 0:
        raise MetricError("no positive rewards to decompose")
    return {k: v / grand for k, v in totals.items()}


def proposals_frequency(store: RowSource) -> dict[int, int]:
    """Number of validators by how many blocks each proposed."""
    per_validator: Counter[int] = Counter()
    for r in _rows(store):
        per_validator[r.validator_index] += r.proposed
    hist = Counter(per_validator.values())
    if not hist:
        return {}
    return {k: hist.get(k, 0) for k in range(max(hist) + 1)}


def streaks_from_sequence(sequence: Sequence[Optional[str]]) -> dict[str, dict[int, int]]:
    """Maximal runs of length >= 2 per label; ``None`` entries break runs."""
    out: dict[str, dict[int, int]] = defaultdict(dict)
    current: Optional[str] = None
    length = 0
    for label in list(sequence) + [None]:
        if label is not None and label == current:
            length += 1
            continue
        if current is not None and length >= 2:
            out[current][length] = out[current].get(length, 0) + 1
        current, length = label, 1
    return {k: dict(sorted(v.items())) for k, v in sorted(out.items())}


def cumulative_streaks(maximal: dict[str, dict[int, int]]) -> dict[str, dict[int, int]]:
    """Runs of length at least k: a length-6 run also counts toward 2..5."""
    out = {}
    for entity, runs in maximal.items():
        top = max(runs)
        out[entity] = {k: sum(c for length, c in runs.items() if length >= k) for k in range(2, top + 1)}
    return out


def proposer_sequence(store: BlockSource, entity_map: EntityMap, include_other: bool = False) -> list[Optional[str]]:
    seq: list[Optional[str]] = []
    for b in _blocks(store):
        if not b.proposed:
            seq.append(None)
            continue
        e = entity_map.resolve(b.proposer_index)
        seq.append(e if include_other or e != OTHER else None)
    return seq


def entity_streaks(store: BlockSource, entity_map: EntityMap, include_other: bool = False) -> dict[str, dict[int, int]]:
    return streaks_from_sequence(proposer_sequence(store, entity_map, include_other))


@dataclass(frozen=True)
class EntityMer:
    achieved: int
    maximum: int

    @property
    def ratio(self) -> float:
        return self.achieved / self.maximum


def mer_per_entity(store: RowSource, entity_map: EntityMap) -> dict[str, EntityMer]:
    """Per-entity MER attainment, plus the ``network`` aggregate."""
    acc: dict[str, list[int]] = defaultdict(lambda: [0, 0])
    net = [0, 0]
    for r in _rows(store):
        a = acc[entity_map.resolve(r.validator_index)]
        a[0] += r.achieved
        a[1] += r.maximum
        net[0] += r.achieved
        net[1] += r.maximum
    out = {e: EntityMer(*v) for e, v in sorted(acc.items()) if v[1] > 0}
    if net[1] > 0:
        out[NETWORK] = EntityMer(*net)
    return out


def block_share_per_entity(store: BlockSource, entity_map: EntityMap) -> dict[str, float]:
    counts: Counter[str] = Counter()
    for b in _blocks(store):
        if b.proposed:
            counts[entity_map.resolve(b.proposer_index)] += 1
    total = sum(counts.values())
    if total == 0:
        raise MetricError("no proposed blocks")
    counts.setdefault(OTHER, 0)
    return {e: counts[e] / total for e in sorted(counts)}


# -- export ---------------------------------------------------------------


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def _pct(x: float) -> str:
    return f"{100 * x:.1f}%"


def write_report(
    store: Store,
    entity_map: EntityMap,
    out_dir: str | Path,
    split_epoch: Optional[int] = None,
    reports: Sequence[str] = REPORTS,
) -> Path:
    """Write every selected metric as CSV and JSON plus ``summary.txt``."""
    unknown = set(reports) - set(REPORTS)
    if unknown:
        raise MetricError(f"unknown reports: {sorted(unknown)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = store.all_rows()
    blocks = store.all_blocks()
    if not rows:
        raise MetricError("store is empty")
    epochs = sorted({r.epoch for r in rows})
    summary = [
        f"epochs indexed: {epochs[0]}..{epochs[-1]} ({len(epochs)})",
        f"validator-epochs: {len(rows)}",
        f"network MER ratio: {_pct(float(compute_mer_ratio(rows)))}",
    ]

    if "missed_flags" in reports:
        series = missed_flags_series(rows)
        _write_csv(out / "missed_flags.csv", ["epoch", "total", "source", "target", "head"],
                   [(p.epoch, p.total, p.source, p.target, p.head) for p in series])
        _write_json(out / "missed_flags.json", {k: [getattr(p, k) for p in series]
                                                for k in ("epoch", "total", "source", "target", "head")})
        n = len(rows)
        s = sum(not r.flag_source for r in rows) / n
        t = sum(not r.flag_target for r in rows) / n
        h = sum(not r.flag_head for r in rows) / n
        summary.append(f"missed flags: total {_pct(s + t + h)}, source {_pct(s)}, target {_pct(t)}, head {_pct(h)}")

    if "mer_series" in reports:
        ms = mer_series(rows)
        _write_csv(out / "mer_series.csv", ["epoch", "mer_ratio"], ms)
        _write_json(out / "mer_series.json", {"epoch": [e for e, _ in ms], "mer_ratio": [v for _, v in ms]})
        summary.append(f"per-epoch MER ratio: min {_pct(min(v for _, v in ms))}, max {_pct(max(v for _, v in ms))}")

    if "missed_blocks" in reports:
        split = split_epoch if split_epoch is not None else epochs[0] + len(epochs) // 2
        try:
            mb = missed_blocks_compare(blocks, split)
        except MetricError as exc:
            summary.append(f"missed blocks (split {split}): {exc}")
            _write_json(out / "missed_blocks.json", {"split_epoch": split, "error": str(exc)})
        else:
            _write_csv(out / "missed_blocks.csv", ["side", "slots", "missed", "ratio"],
                       [("before", mb.before_slots, mb.before_count, mb.before_ratio),
                        ("after", mb.after_slots, mb.after_count, mb.after_ratio)])
            _write_json(out / "missed_blocks.json", {"split_epoch": split, **mb.__dict__})
            summary.append(
                f"missed blocks (split {split}): {_pct(mb.before_ratio)} -> {_pct(mb.after_ratio)}, "
                f"reduction {_pct(mb.reduction)}"
            )

    if "reward_decomposition" in reports:
        totals = reward_totals(rows)
        shares = reward_decomposition(rows)
        _write_csv(out / "reward_decomposition.csv", ["source", "gwei", "share"],
                   [(k, totals[k], shares[k]) for k in totals])
        _write_json(out / "reward_decomposition.json", {"gwei": totals, "share": shares})
        summary.append("reward shares: " + ", ".join(f"{k} {_pct(v)}" for k, v in shares.items()))

    if "proposals_frequency" in reports:
        hist = proposals_frequency(rows)
        _write_csv(out / "proposals_frequency.csv", ["proposals", "validators"], sorted(hist.items()))
        _write_json(out / "proposals_frequency.json", {str(k): v for k, v in sorted(hist.items())})
        total = sum(hist.values())
        summary.append(
            "validators with 0 or 1 proposals: "
            f"{_pct((hist.get(0, 0) + hist.get(1, 0)) / total)} of {total}"
        )

    if "entity_streaks" in reports:
        maximal = entity_streaks(blocks, entity_map)
        cumulative = cumulative_streaks(maximal)
        _write_csv(out / "entity_streaks.csv", ["entity", "length", "runs", "runs_at_least"],
                   [(e, k, maximal[e].get(k, 0), cumulative[e][k]) for e in maximal for k in cumulative[e]])
        _write_json(out / "entity_streaks.json", {
            "maximal": {e: {str(k): c for k, c in v.items()} for e, v in maximal.items()},
            "cumulative": {e: {str(k): c for k, c in v.items()} for e, v in cumulative.items()},
        })
        longest = {e: max(v) for e, v in maximal.items()}
        summary.append("longest consecutive proposals: " + (
            ", ".join(f"{e} {k}" for e, k in longest.items()) or "none"))

    if "mer_per_entity" in reports:
        per = mer_per_entity(rows, entity_map)
        _write_csv(out / "mer_per_entity.csv", ["entity", "achieved", "maximum", "ratio"],
                   [(e, m.achieved, m.maximum, m.ratio) for e, m in per.items()])
        _write_json(out / "mer_per_entity.json", {e: m.ratio for e, m in per.items()})
        summary.append("MER per entity: " + ", ".join(f"{e} {_pct(m.ratio)}" for e, m in per.items()))

    if "block_share" in reports:
        shares = block_share_per_entity(blocks, entity_map)
        counts = Counter(entity_map.resolve(b.proposer_index) for b in blocks if b.proposed)
        _write_csv(out / "block_share.csv", ["entity", "blocks", "share"],
                   [(e, counts.get(e, 0), s) for e, s in shares.items()])
        _write_json(out / "block_share.json", shares)
        summary.append("block share: " + ", ".join(f"{e} {_pct(s)}" for e, s in shares.items()))

    (out / "summary.txt").write_text("\n".join(summary) + "\n")
    return out / "summary.txt"


def mer_fraction(store: RowSource) -> Fraction:
    return compute_mer_ratio(_rows(store))
