"""Seeded desk-scale beacon chain.

Proposer and sync-committee rewards land at the slot that processes the
block. Attestation rewards for epoch ``n`` land at the epoch transition that
closes epoch ``n + 1``, once every vote of epoch ``n`` has had its full
inclusion window.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import IO, Iterator, Optional

import numpy as np
from pydantic import BaseModel, Field, field_validator

from . import rewards as rm
from .rewards import DEFAULT_PARAMS, WeightParams
from .schemas import BeaconStateSnapshot, BlockRecord, encode_bits

log = logging.getLogger(__name__)

# RNG stream identifiers; every draw is keyed by (seed, epoch-or-slot, stream).
_SLOT_STREAM = 1
_BLOCK_STREAM = 2
_ASSIGN_STREAM = 3
_SYNC_STREAM = 4

_FAR_FUTURE = 2**63 - 1
_HYSTERESIS_QUOTIENT = 4
_DOWNWARD_MULTIPLIER = 1
_UPWARD_MULTIPLIER = 5

Probability = float


class SimError(ValueError):
    pass


class FaultProfile(BaseModel):
    """Raises the miss probability of every duty for a set of validators."""

    validators: list[int]
    first_epoch: int = 0
    last_epoch: Optional[int] = None
    p_miss: float = Field(1.0, ge=0.0, le=1.0)

    def covers(self, epoch: int) -> bool:
        return self.first_epoch <= epoch and (self.last_epoch is None or epoch <= self.last_epoch)


class SlashingEvent(BaseModel):
    slot: int = Field(ge=0)
    validator_index: int = Field(ge=0)
    whistleblower_index: Optional[int] = None


class SimConfig(BaseModel):
    seed: int = Field(0, ge=0, lt=2**64)
    validator_count: int = Field(64, ge=64)
    epochs: int = Field(50, ge=1)
    p_missed_block: float = Field(0.0, ge=0.0, le=1.0)
    p_missed_source: float = Field(0.0, ge=0.0, le=1.0)
    p_missed_target: float = Field(0.0, ge=0.0, le=1.0)
    p_missed_head: float = Field(0.0, ge=0.0, le=1.0)
    p_sync_miss: float = Field(0.0, ge=0.0, le=1.0)
    growth_per_epoch: float = Field(0.0, ge=0.0)
    el_tip_distribution: tuple[int, int] = (0, 0)
    # (first_epoch, p) pairs overriding p_missed_block from that epoch on
    block_miss_schedule: list[tuple[int, float]] = Field(default_factory=list)
    fault_profiles: list[FaultProfile] = Field(default_factory=list)
    slashings: list[SlashingEvent] = Field(default_factory=list)
    # None: min(512, active validators // 2)
    sync_committee_size: Optional[int] = Field(None, ge=1)
    effective_balance_hysteresis: bool = False

    @field_validator("el_tip_distribution")
    @classmethod
    def _tip_range(cls, v: tuple[int, int]) -> tuple[int, int]:
        lo, hi = v
        if lo < 0 or hi < lo:
            raise ValueError("el_tip_distribution must be (min, max) with 0 <= min <= max")
        return v

    @field_validator("block_miss_schedule")
    @classmethod
    def _schedule(cls, v: list[tuple[int, float]]) -> list[tuple[int, float]]:
        for epoch, p in v:
            if epoch < 0 or not 0.0 <= p <= 1.0:
                raise ValueError("schedule entries are (epoch >= 0, p in [0, 1])")
        return sorted(v)

    def block_miss_probability(self, epoch: int) -> float:
        p = self.p_missed_block
        for start, value in self.block_miss_schedule:
            if epoch >= start:
                p = value
        return p


@dataclass
class Registry:
    balances: list[int]
    effective_balances: list[int]
    activation_epochs: list[int]
    exit_epochs: list[int]
    slashed: list[bool]

    @classmethod
    def genesis(cls, count: int, params: WeightParams = DEFAULT_PARAMS) -> Registry:
        b = params.max_effective_balance
        return cls([b] * count, [b] * count, [0] * count, [_FAR_FUTURE] * count, [False] * count)

    def __len__(self) -> int:
        return len(self.balances)

    def is_active(self, index: int, epoch: int) -> bool:
        return self.activation_epochs[index] <= epoch < self.exit_epochs[index]

    def active_indices(self, epoch: int) -> list[int]:
        return [i for i in range(len(self)) if self.is_active(i, epoch)]

    def add_validator(self, activation_epoch: int, params: WeightParams = DEFAULT_PARAMS) -> int:
        b = params.max_effective_balance
        self.balances.append(b)
        self.effective_balances.append(b)
        self.activation_epochs.append(activation_epoch)
        self.exit_epochs.append(_FAR_FUTURE)
        self.slashed.append(False)
        return len(self) - 1


@dataclass(frozen=True)
class EpochAssignments:
    epoch: int
    committees: tuple[tuple[int, ...], ...]
    proposers: tuple[int, ...]
    sync_committee: tuple[int, ...]


@dataclass(frozen=True)
class SlotOutcome:
    slot: int
    proposer_index: int
    block_proposed: bool
    votes: tuple[tuple[int, int], ...]
    sync_bits: tuple[bool, ...]
    el_tips: int


@dataclass(frozen=True)
class EpochContext:
    """Reward inputs frozen at the start of an epoch."""

    epoch: int
    active: frozenset[int]
    effective_balances: tuple[int, ...]
    total_active_balance: int
    base_per_increment: int
    participant_reward: int

    def base(self, index: int, params: WeightParams) -> int:
        # Same value as rm.base_reward, without recomputing the square root.
        return self.effective_balances[index] // params.effective_balance_increment * self.base_per_increment


def epoch_context(registry: Registry, epoch: int, params: WeightParams = DEFAULT_PARAMS) -> EpochContext:
    active = registry.active_indices(epoch)
    total = sum(registry.effective_balances[i] for i in active)
    total = max(total, params.effective_balance_increment)
    per_increment = rm.base_reward_per_increment(total, params)
    inc = params.effective_balance_increment
    per_validator_sum = sum(registry.effective_balances[i] // inc * per_increment for i in active)
    return EpochContext(
        epoch=epoch,
        active=frozenset(active),
        effective_balances=tuple(registry.effective_balances),
        total_active_balance=total,
        base_per_increment=per_increment,
        participant_reward=rm.sync_participant_reward(rm.sync_total_reward(per_validator_sum, params), params),
    )


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(list(key))


def sync_committee_size_for(active_count: int, config: SimConfig, params: WeightParams) -> int:
    if config.sync_committee_size is not None:
        return min(config.sync_committee_size, active_count, params.sync_committee_size)
    return min(params.sync_committee_size, max(1, active_count // 2))


def assign_epoch(
    epoch: int,
    registry: Registry,
    seed: int,
    config: SimConfig | None = None,
    params: WeightParams = DEFAULT_PARAMS,
) -> EpochAssignments:
    """Committees, proposers and sync committee for ``epoch``; pure in (seed, epoch, registry)."""
    config = config or SimConfig(seed=seed)
    active = registry.active_indices(epoch)
    if len(active) < params.slots_per_epoch:
        raise SimError(f"epoch {epoch}: {len(active)} active validators, need {params.slots_per_epoch}")
    rng = _rng(seed, epoch, _ASSIGN_STREAM)
    shuffled = rng.permutation(np.asarray(active, dtype=np.int64))
    committees = tuple(tuple(int(v) for v in c) for c in np.array_split(shuffled, params.slots_per_epoch))
    proposers = tuple(int(v) for v in rng.choice(np.asarray(active), size=params.slots_per_epoch, replace=True))

    period = epoch // params.epochs_per_sync_period
    period_start = period * params.epochs_per_sync_period
    eligible = registry.active_indices(period_start) or active
    size = sync_committee_size_for(len(eligible), config, params)
    srng = _rng(seed, period, _SYNC_STREAM)
    sync = tuple(int(v) for v in srng.choice(np.asarray(eligible), size=size, replace=False))
    return EpochAssignments(epoch, committees, proposers, sync)


def block_presence(config: SimConfig, epoch: int, params: WeightParams = DEFAULT_PARAMS) -> list[bool]:
    """Which slots of ``epoch`` carry a block. Same draws the full simulator uses."""
    p = config.block_miss_probability(epoch)
    u = _rng(config.seed, epoch, _BLOCK_STREAM).random(params.slots_per_epoch)
    return [bool(x >= p) for x in u]


def _miss_probabilities(validators: tuple[int, ...], epoch: int, config: SimConfig) -> np.ndarray:
    """Per-validator miss probabilities, columns source/target/head/sync."""
    base = np.array(
        [config.p_missed_source, config.p_missed_target, config.p_missed_head, config.p_sync_miss]
    )
    probs = np.tile(base, (len(validators), 1))
    for profile in config.fault_profiles:
        if not profile.covers(epoch):
            continue
        members = set(profile.validators)
        for row, v in enumerate(validators):
            if v in members:
                np.maximum(probs[row], profile.p_miss, out=probs[row])
    return probs


def simulate_slot(
    slot: int,
    assignments: EpochAssignments,
    config: SimConfig,
    params: WeightParams = DEFAULT_PARAMS,
) -> SlotOutcome:
    epoch = slot // params.slots_per_epoch
    if epoch != assignments.epoch:
        raise SimError(f"slot {slot} is outside epoch {assignments.epoch}")
    idx = slot % params.slots_per_epoch
    proposed = block_presence(config, epoch, params)[idx]

    rng = _rng(config.seed, slot, _SLOT_STREAM)
    committee = assignments.committees[idx]
    probs = _miss_probabilities(committee, epoch, config)
    hits = rng.random((len(committee), 3)) >= probs[:, :3]
    votes = tuple(
        (v, int(h[0]) | int(h[1]) << 1 | int(h[2]) << 2) for v, h in zip(committee, hits)
    )
    sync_probs = _miss_probabilities(assignments.sync_committee, epoch, config)[:, 3]
    sync_bits = rng.random(len(assignments.sync_committee)) >= sync_probs
    lo, hi = config.el_tip_distribution
    tip = int(rng.integers(lo, hi + 1)) if proposed else 0
    return SlotOutcome(
        slot=slot,
        proposer_index=assignments.proposers[idx],
        block_proposed=proposed,
        votes=votes,
        sync_bits=tuple(bool(b) and proposed for b in sync_bits),
        el_tips=tip,
    )


@dataclass
class SimState:
    registry: Registry
    params: WeightParams = DEFAULT_PARAMS
    slot: int = -1
    current_participation: list[int] = field(default_factory=list)
    previous_participation: list[int] = field(default_factory=list)
    pending_votes: deque = field(default_factory=deque)
    pending_slashings: list[SlashingEvent] = field(default_factory=list)
    contexts: dict[int, EpochContext] = field(default_factory=dict)
    assignments: Optional[EpochAssignments] = None
    epoch_blocks: list[BlockRecord] = field(default_factory=list)
    # Gwei credited minus debited per slot, including the epoch transition
    # that precedes it; used for the conservation audit.
    applied: dict[int, int] = field(default_factory=dict)
    penalty_shortfall: int = 0

    @property
    def epoch(self) -> int:
        return max(self.slot, 0) // self.params.slots_per_epoch

    def credit(self, index: int, amount: int) -> None:
        self.registry.balances[index] += amount
        self.applied[self.slot] = self.applied.get(self.slot, 0) + amount

    def debit(self, index: int, amount: int) -> None:
        taken = min(amount, self.registry.balances[index])
        self.penalty_shortfall += amount - taken
        self.registry.balances[index] -= taken
        self.applied[self.slot] = self.applied.get(self.slot, 0) - taken

    def snapshot(self) -> BeaconStateSnapshot:
        reg = self.registry
        last = self.epoch_blocks[-1]
        assert self.assignments is not None
        return BeaconStateSnapshot.model_construct(
            slot=self.slot,
            balances=list(reg.balances),
            effective_balances=list(reg.effective_balances),
            block_proposed=last.block_proposed,
            proposer_index=last.proposer_index,
            participation_flags=list(self.current_participation),
            sync_participation=last.sync_participation,
            el_tips=last.el_tips,
            previous_participation_flags=list(self.previous_participation),
            activation_epochs=list(reg.activation_epochs),
            exit_epochs=list(reg.exit_epochs),
            slashed=list(reg.slashed),
            sync_committee=list(self.assignments.sync_committee),
            epoch_blocks=list(self.epoch_blocks),
        )


def _weighted_new_bits(bits: int, weights: tuple[int, int, int]) -> int:
    return sum(w for i, w in enumerate(weights) if bits >> i & 1)


def apply_slot_transition(state: SimState, outcome: SlotOutcome) -> BeaconStateSnapshot:
    """Process ``outcome`` (the slot after ``state.slot``) and return the new snapshot."""
    params = state.params
    if outcome.slot != state.slot + 1:
        raise SimError(f"expected slot {state.slot + 1}, got {outcome.slot}")
    state.slot = outcome.slot
    epoch = state.epoch
    ctx = state.contexts[epoch]
    assignments = state.assignments
    assert assignments is not None and assignments.epoch == epoch

    included: list[tuple[int, int]] = []
    slashings: list[tuple[int, int]] = []
    if outcome.block_proposed:
        proposer = outcome.proposer_index
        window_start = state.slot - params.slots_per_epoch
        weighted = 0
        while state.pending_votes and state.pending_votes[0][0] < window_start:
            state.pending_votes.popleft()
        for vote_slot, v, bits in state.pending_votes:
            vote_epoch = vote_slot // params.slots_per_epoch
            part = state.current_participation if vote_epoch == epoch else state.previous_participation
            new = bits & ~part[v]
            if new:
                part[v] |= new
                included.append((v, new))
                weighted += ctx.base(v, params) * _weighted_new_bits(new, params.flag_weights)
        state.pending_votes.clear()

        signatures = 0
        r = ctx.participant_reward
        for member, bit in zip(assignments.sync_committee, outcome.sync_bits):
            if member not in ctx.active:
                continue
            if bit:
                state.credit(member, r)
                signatures += 1
            else:
                state.debit(member, r)
        cl = rm.proposer_reward(
            rm.proposer_attestation_component(weighted, params),
            rm.proposer_sync_component(signatures, r, params),
        )
        state.credit(proposer, cl)
        state.credit(proposer, outcome.el_tips)

        due = [e for e in state.pending_slashings if e.slot <= state.slot]
        for event in due:
            state.pending_slashings.remove(event)
            target = event.validator_index
            if target >= len(state.registry) or state.registry.slashed[target] or target not in ctx.active:
                log.warning("slot %d: skipping slashing of %d", state.slot, target)
                continue
            whistleblower = proposer if event.whistleblower_index is None else event.whistleblower_index
            amounts = rm.slashing_amounts(ctx.effective_balances[target], params)
            state.debit(target, amounts.penalty)
            state.credit(proposer, amounts.proposer_reward)
            state.credit(whistleblower, amounts.whistleblower_reward)
            state.registry.slashed[target] = True
            state.registry.exit_epochs[target] = epoch + 1
            slashings.append((target, whistleblower))

    # Votes cast at this slot become includable from the next one.
    state.pending_votes.extend((outcome.slot, v, bits) for v, bits in outcome.votes if bits)

    state.epoch_blocks.append(
        BlockRecord.model_construct(
            slot=outcome.slot,
            proposer_index=outcome.proposer_index,
            block_proposed=outcome.block_proposed,
            sync_participation=encode_bits(outcome.sync_bits),
            el_tips=outcome.el_tips if outcome.block_proposed else 0,
            attestations=included,
            slashings=slashings,
        )
    )
    return state.snapshot()


def attesting_balances(flags: list[int], ctx: EpochContext) -> rm.EpochBalances:
    att = [0, 0, 0]
    for v in ctx.active:
        bits = flags[v]
        for i in range(3):
            if bits >> i & 1:
                att[i] += ctx.effective_balances[v]
    return rm.EpochBalances(ctx.total_active_balance, att[0], att[1], att[2])


@dataclass(frozen=True)
class AttestationDelta:
    reward: int
    penalty: int
    max_reward: int


def attestation_deltas(flags: list[int], ctx: EpochContext, params: WeightParams = DEFAULT_PARAMS) -> dict[int, AttestationDelta]:
    """Reward, penalty and all-flags reward for every validator active in ``ctx``."""
    balances = attesting_balances(flags, ctx)
    out: dict[int, AttestationDelta] = {}
    cache: dict[tuple[int, int], AttestationDelta] = {}
    for v in sorted(ctx.active):
        key = (ctx.effective_balances[v], flags[v])
        delta = cache.get(key)
        if delta is None:
            base = ctx.base(v, params)
            fs = rm.FlagSet.from_bits(flags[v])
            delta = AttestationDelta(
                rm.attestation_reward(fs, base, balances, params),
                rm.attestation_penalty(fs.missed(), base, params, balances),
                rm.attestation_reward(rm.FlagSet.all(), base, balances, params),
            )
            cache[key] = delta
        out[v] = delta
    return out


def apply_epoch_transition(state: SimState, hysteresis: bool = False) -> dict[int, AttestationDelta]:
    """Close the epoch at ``state.slot``: settle the previous epoch's votes,
    refresh effective balances and rotate participation."""
    params = state.params
    epoch = state.epoch
    deltas: dict[int, AttestationDelta] = {}
    # Transition effects are booked on the first slot of the next epoch.
    book_slot = state.slot
    state.slot = book_slot + 1
    try:
        ctx = state.contexts.get(epoch - 1)
        if ctx is not None:
            deltas = attestation_deltas(state.previous_participation, ctx, params)
            for v, d in deltas.items():
                if d.reward:
                    state.credit(v, d.reward)
                if d.penalty:
                    state.debit(v, d.penalty)
        if hysteresis:
            _update_effective_balances(state.registry, params)
    finally:
        state.slot = book_slot
    state.previous_participation = state.current_participation
    state.current_participation = [0] * len(state.registry)
    return deltas


def _update_effective_balances(registry: Registry, params: WeightParams) -> None:
    inc = params.effective_balance_increment
    step = inc // _HYSTERESIS_QUOTIENT
    down = step * _DOWNWARD_MULTIPLIER
    up = step * _UPWARD_MULTIPLIER
    for i, balance in enumerate(registry.balances):
        eff = registry.effective_balances[i]
        if balance + down < eff or eff + up < balance:
            registry.effective_balances[i] = min(balance - balance % inc, params.max_effective_balance)


class Simulator:
    """Runs a :class:`SimConfig` slot by slot.

    After :meth:`run` completes, ``truth_flags[e]`` holds the participation
    bits settled for epoch ``e`` and ``attestation_log[e]`` the deltas paid
    for it.
    """

    def __init__(self, config: SimConfig, params: WeightParams = DEFAULT_PARAMS):
        self.config = config
        self.params = params
        self.state = SimState(Registry.genesis(config.validator_count, params), params)
        self.state.current_participation = [0] * config.validator_count
        self.state.previous_participation = [0] * config.validator_count
        self.state.pending_slashings = sorted(config.slashings, key=lambda e: e.slot)
        self.truth_flags: dict[int, list[int]] = {}
        self.sampled_flags: dict[int, dict[int, int]] = {}
        self.attestation_log: dict[int, dict[int, AttestationDelta]] = {}
        self.assignment_log: dict[int, EpochAssignments] = {}
        self._growth_carry = 0.0

    def _begin_epoch(self, epoch: int) -> None:
        state = self.state
        if epoch > 0 and self.config.growth_per_epoch:
            self._growth_carry += self.config.growth_per_epoch * self.config.validator_count
            new = int(self._growth_carry)
            self._growth_carry -= new
            for _ in range(new):
                state.registry.add_validator(epoch, self.params)
                state.current_participation.append(0)
                state.previous_participation.append(0)
        state.contexts[epoch] = epoch_context(state.registry, epoch, self.params)
        state.contexts.pop(epoch - 3, None)
        state.assignments = assign_epoch(epoch, state.registry, self.config.seed, self.config, self.params)
        self.assignment_log[epoch] = state.assignments
        state.epoch_blocks = []
        self.sampled_flags[epoch] = {}

    def run(self) -> Iterator[BeaconStateSnapshot]:
        spe = self.params.slots_per_epoch
        for epoch in range(self.config.epochs):
            self._begin_epoch(epoch)
            assert self.state.assignments is not None
            for slot in range(epoch * spe, (epoch + 1) * spe):
                outcome = simulate_slot(slot, self.state.assignments, self.config, self.params)
                self.sampled_flags[epoch].update(outcome.votes)
                yield apply_slot_transition(self.state, outcome)
            if epoch >= 1:
                self.truth_flags[epoch - 1] = list(self.state.previous_participation)
            self.attestation_log[epoch - 1] = apply_epoch_transition(
                self.state, self.config.effective_balance_hysteresis
            )
            self.attestation_log.pop(-1, None)


def run(config: SimConfig, params: WeightParams = DEFAULT_PARAMS) -> Iterator[BeaconStateSnapshot]:
    return Simulator(config, params).run()


def write_ndjson(stream: Iterator[BeaconStateSnapshot], fh: IO[str]) -> int:
    n = 0
    for snap in stream:
        fh.write(snap.model_dump_json())
        fh.write("\n")
        n += 1
    return n


def read_ndjson(fh: IO[str]) -> Iterator[BeaconStateSnapshot]:
    for line in fh:
        if line.strip():
            yield BeaconStateSnapshot.model_validate_json(line)


def snapshot_digest(stream: Iterator[BeaconStateSnapshot]) -> str:
    import hashlib

    h = hashlib.sha256()
    for snap in stream:
        h.update(snap.model_dump_json().encode())
        h.update(b"\n")
    return h.hexdigest()


def dumps(snapshot: BeaconStateSnapshot) -> str:
    return json.dumps(snapshot.model_dump(mode="json"), separators=(",", ":"))
