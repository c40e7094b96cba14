"""Epoch-by-epoch reward indexer over end-of-epoch beacon states.

Rows for epoch ``n`` are built from two states: the last state of epoch ``n``
(effective balances, active set, sync committee, the epoch's blocks) and the
last state of epoch ``n + 1``, whose previous-epoch participation holds the
settled votes of epoch ``n``.
"""

from __future__ import annotations

import logging
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional

from . import rewards as rm
from .entities import EntityMap
from .rewards import DEFAULT_PARAMS, WeightParams
from .schemas import BeaconStateSnapshot, decode_bits
from .sources import SourceError, StateProvider
from .store import AnalyzerCheckpoint, BlockRow, SlashingRow, Store, ValidatorEpochRow

log = logging.getLogger(__name__)

CHECKPOINT_EVERY = 10


class AnalyzerError(Exception):
    pass


class AnalyzerHalt(AnalyzerError):
    """The provider failed mid-range; the checkpoint allows a resume."""

    def __init__(self, message: str, checkpoint: Optional[AnalyzerCheckpoint]):
        super().__init__(message)
        self.checkpoint = checkpoint


def last_slot_of(epoch: int, params: WeightParams = DEFAULT_PARAMS) -> int:
    return (epoch + 1) * params.slots_per_epoch - 1


@dataclass(frozen=True)
class _EpochView:
    epoch: int
    active: list[int]
    effective_balances: list[int]
    total_active_balance: int
    per_increment: int
    participant_reward: int

    def base(self, v: int, params: WeightParams) -> int:
        return self.effective_balances[v] // params.effective_balance_increment * self.per_increment


def _view(state: BeaconStateSnapshot, epoch: int, params: WeightParams) -> _EpochView:
    active = state.active_indices(epoch)
    eff = state.effective_balances
    total = max(sum(eff[v] for v in active), params.effective_balance_increment)
    per_inc = rm.base_reward_per_increment(total, params)
    inc = params.effective_balance_increment
    base_sum = sum(eff[v] // inc * per_inc for v in active)
    participant = rm.sync_participant_reward(rm.sync_total_reward(base_sum, params), params)
    return _EpochView(epoch, active, eff, total, per_inc, participant)


def resolve_attestations(
    epoch_n_state: BeaconStateSnapshot,
    epoch_n_plus_1_state: BeaconStateSnapshot,
    params: WeightParams = DEFAULT_PARAMS,
) -> dict[int, rm.FlagSet]:
    """Flags attained in epoch ``n`` by each validator active in it."""
    n = epoch_n_state.epoch(params.slots_per_epoch)
    if epoch_n_plus_1_state.slot != last_slot_of(n + 1, params):
        raise AnalyzerError(f"need the last state of epoch {n + 1}, got slot {epoch_n_plus_1_state.slot}")
    settled = epoch_n_plus_1_state.previous_participation_flags
    return {v: rm.FlagSet.from_bits(settled[v]) for v in epoch_n_state.active_indices(n)}


def epoch_rows(
    state_n: BeaconStateSnapshot,
    state_n1: BeaconStateSnapshot,
    entity_map: EntityMap,
    params: WeightParams = DEFAULT_PARAMS,
) -> tuple[list[ValidatorEpochRow], list[BlockRow], list[SlashingRow]]:
    n = state_n.epoch(params.slots_per_epoch)
    if state_n.slot != last_slot_of(n, params):
        raise AnalyzerError(f"state at slot {state_n.slot} is not the last of its epoch")
    view = _view(state_n, n, params)
    flags = resolve_attestations(state_n, state_n1, params)
    att = [0, 0, 0]
    for v, fs in flags.items():
        for i, hit in enumerate(fs):
            if hit:
                att[i] += view.effective_balances[v]
    balances = rm.EpochBalances(view.total_active_balance, *att)
    active = set(view.active)

    committee = state_n.sync_committee
    in_sync = set(committee) & active
    sync_net = {v: 0 for v in in_sync}
    proposed = {v: 0 for v in view.active}
    missed = {v: 0 for v in view.active}
    prop_reward = {v: 0 for v in view.active}
    el = {v: 0 for v in view.active}
    blocks: list[BlockRow] = []
    slashings: list[SlashingRow] = []
    r = view.participant_reward

    expected = list(range(n * params.slots_per_epoch, (n + 1) * params.slots_per_epoch))
    if [b.slot for b in state_n.epoch_blocks] != expected:
        raise AnalyzerError(f"epoch {n}: state does not carry all {params.slots_per_epoch} block records")
    for blk in state_n.epoch_blocks:
        p = blk.proposer_index
        if not blk.block_proposed:
            missed[p] += 1
            blocks.append(BlockRow(blk.slot, n, p, False, 0, 0, entity_map.resolve(p)))
            continue
        proposed[p] += 1
        bits = decode_bits(blk.sync_participation, len(committee))
        signatures = 0
        for member, bit in zip(committee, bits):
            if member not in active:
                continue
            if bit:
                sync_net[member] += r
                signatures += 1
            else:
                sync_net[member] -= r
        weighted = 0
        for v, new_bits in blk.attestations:
            for i, w in enumerate(params.flag_weights):
                if new_bits >> i & 1:
                    weighted += view.base(v, params) * w
        cl = rm.proposer_reward(
            rm.proposer_attestation_component(weighted, params),
            rm.proposer_sync_component(signatures, r, params),
        )
        prop_reward[p] += cl
        el[p] += blk.el_tips
        blocks.append(BlockRow(blk.slot, n, p, True, blk.el_tips, cl, entity_map.resolve(p)))
        for target, whistleblower in blk.slashings:
            amounts = rm.slashing_amounts(view.effective_balances[target], params)
            slashings.append(
                SlashingRow(
                    n, blk.slot, target, amounts.penalty, p, amounts.proposer_reward,
                    whistleblower, amounts.whistleblower_reward,
                )
            )

    all_flags = rm.FlagSet.all()
    sync_max = params.slots_per_epoch * r
    rows = []
    cache: dict[tuple[int, int], tuple[int, int, int]] = {}
    for v in view.active:
        fs = flags[v]
        key = (view.effective_balances[v], fs.to_bits())
        amounts = cache.get(key)
        if amounts is None:
            base = view.base(v, params)
            amounts = (
                rm.attestation_reward(fs, base, balances, params),
                rm.attestation_penalty(fs.missed(), base, params, balances),
                rm.attestation_reward(all_flags, base, balances, params),
            )
            cache[key] = amounts
        member = v in in_sync
        rows.append(
            ValidatorEpochRow(
                epoch=n,
                validator_index=v,
                effective_balance=view.effective_balances[v],
                flag_source=fs.source,
                flag_target=fs.target,
                flag_head=fs.head,
                att_reward=amounts[0],
                att_penalty=amounts[1],
                att_max=amounts[2],
                in_sync=member,
                sync_reward=sync_net.get(v, 0),
                sync_max=sync_max if member else 0,
                proposed=proposed[v],
                missed_proposals=missed[v],
                proposer_reward=prop_reward[v],
                el_reward=el[v],
                entity=entity_map.resolve(v),
            )
        )
    return rows, blocks, slashings


class _Prefetcher:
    """At most one request in flight ahead of the consumer."""

    def __init__(self, provider: StateProvider):
        self.provider = provider
        self.pool = ThreadPoolExecutor(max_workers=1)
        self.pending: dict[int, Future] = {}

    def get(self, slot: int) -> BeaconStateSnapshot:
        fut = self.pending.pop(slot, None)
        if fut is None:
            fut = self.pool.submit(self.provider.get_state, slot)
        return fut.result()

    def ahead(self, slot: int) -> None:
        if not self.pending:
            self.pending[slot] = self.pool.submit(self.provider.get_state, slot)

    def close(self) -> None:
        for fut in self.pending.values():
            fut.cancel()
        self.pool.shutdown(wait=True)


def process_range(
    provider: StateProvider,
    first_epoch: int,
    last_epoch: int,
    entity_map: EntityMap,
    store: Store,
    params: WeightParams = DEFAULT_PARAMS,
    resume: bool = True,
) -> Store:
    """Index epochs ``first_epoch..last_epoch``; needs the end states of
    ``first_epoch..last_epoch + 1``."""
    if last_epoch < first_epoch or first_epoch < 0:
        raise AnalyzerError(f"empty epoch range {first_epoch}..{last_epoch}")
    start = first_epoch
    ckpt = store.read_checkpoint()
    if resume and ckpt is not None and first_epoch <= ckpt.last_fully_indexed_epoch < last_epoch:
        start = ckpt.last_fully_indexed_epoch + 1
        log.info("resuming at epoch %d from checkpoint", start)

    fetch = _Prefetcher(provider)
    done: Optional[int] = None

    def checkpoint() -> Optional[AnalyzerCheckpoint]:
        if done is None:
            return store.read_checkpoint()
        cp = AnalyzerCheckpoint(done, last_slot_of(done + 1, params))
        store.write_checkpoint(cp)
        return cp

    try:
        current = fetch.get(last_slot_of(start, params))
        for n in range(start, last_epoch + 1):
            nxt = fetch.get(last_slot_of(n + 1, params))
            if n + 1 < last_epoch:
                fetch.ahead(last_slot_of(n + 2, params))
            rows, blocks, slashings = epoch_rows(current, nxt, entity_map, params)
            store.commit_epoch(n, rows, blocks, slashings)
            done = n
            if (n - first_epoch + 1) % CHECKPOINT_EVERY == 0:
                checkpoint()
            current = nxt
    except SourceError as exc:
        cp = checkpoint()
        where = "nothing indexed" if cp is None else f"checkpoint at epoch {cp.last_fully_indexed_epoch}"
        raise AnalyzerHalt(f"provider failed: {exc} ({where})", cp) from exc
    finally:
        fetch.close()
    checkpoint()
    return store


def compute_mer_ratio(rows: Iterable[ValidatorEpochRow]) -> Fraction:
    """Achieved over maximum extractable reward, as an exact fraction."""
    achieved = maximum = 0
    for r in rows:
        achieved += r.achieved
        maximum += r.maximum
    if maximum == 0:
        raise AnalyzerError("MER ratio undefined: no extractable reward")
    return Fraction(achieved, maximum)


@dataclass(frozen=True)
class Mismatch:
    validator_index: int
    balance_delta: int
    ledger_delta: int


def reconcile(
    store: Store,
    provider: StateProvider,
    first_epoch: int,
    last_epoch: int,
    params: WeightParams = DEFAULT_PARAMS,
) -> list[Mismatch]:
    """Compare balance changes between the end states of ``first_epoch + 1``
    and ``last_epoch`` with the ledger.

    Slot-level credits (sync, proposer, tips, slashing) of epochs
    ``first + 2..last`` and attestation settlements of epochs ``first..last - 2``
    fall between those two states.
    """
    a, b = first_epoch + 1, last_epoch
    if b - a < 1:
        raise AnalyzerError("reconciliation needs at least three indexed epochs")
    before = provider.get_state(last_slot_of(a, params))
    after = provider.get_state(last_slot_of(b, params))
    ledger: dict[int, int] = {}
    for n in range(a + 1, b + 1):
        for r in store.epoch_rows(n):
            ledger[r.validator_index] = ledger.get(r.validator_index, 0) + r.sync_reward + r.proposer_reward + r.el_reward
    for n in range(a - 1, b - 1):
        for r in store.epoch_rows(n):
            ledger[r.validator_index] = ledger.get(r.validator_index, 0) + r.att_reward - r.att_penalty
    for s in store.all_slashings():
        if a + 1 <= s.epoch <= b:
            ledger[s.validator_index] = ledger.get(s.validator_index, 0) - s.penalty
            ledger[s.proposer_index] = ledger.get(s.proposer_index, 0) + s.proposer_reward
            ledger[s.whistleblower_index] = ledger.get(s.whistleblower_index, 0) + s.whistleblower_reward
    mismatches = []
    for v in range(len(before.balances)):
        delta = after.balances[v] - before.balances[v]
        if delta != ledger.get(v, 0):
            mismatches.append(Mismatch(v, delta, ledger.get(v, 0)))
    return mismatches
