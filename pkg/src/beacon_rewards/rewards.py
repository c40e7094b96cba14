"""Post-merge consensus reward arithmetic.

Everything here is pure integer arithmetic in Gwei. Floor division happens
only at the points documented on each function, so results are reproducible
bit-for-bit and can be checked against a rational-number oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple

Gwei = int
"""Unsigned token amount; 1 ETH = 10**9 Gwei. Signed deltas are plain ints."""

GWEI_PER_ETH = 10**9
UINT64_MAX = 2**64 - 1

# Slashing quotients are fixed protocol literals, not tunable weights.
SLASHING_PENALTY_QUOTIENT = 32
WHISTLEBLOWER_REWARD_QUOTIENT = 512

DEFAULT_BLOCK_GAS_LIMIT = 30_000_000


class RewardDomainError(ValueError):
    """Input outside the domain of a reward formula."""


@dataclass(frozen=True)
class WeightParams:
    """Protocol constants. Defaults are the Altair mainnet values."""

    base_reward_factor: int = 64
    timely_source_weight: int = 14
    timely_target_weight: int = 26
    timely_head_weight: int = 14
    sync_reward_weight: int = 2
    proposer_weight: int = 8
    weight_denominator: int = 64
    slots_per_epoch: int = 32
    sync_committee_size: int = 512
    epochs_per_sync_period: int = 256
    effective_balance_increment: Gwei = GWEI_PER_ETH
    max_effective_balance: Gwei = 32 * GWEI_PER_ETH
    # Off: a missed flag costs the full-participation flag reward.
    # On: the penalty is scaled by the attesting-balance fraction like the reward.
    penalty_scales_with_participation: bool = False

    def __post_init__(self) -> None:
        weights = (
            self.timely_source_weight,
            self.timely_target_weight,
            self.timely_head_weight,
            self.sync_reward_weight,
            self.proposer_weight,
        )
        if any(w <= 0 for w in weights):
            raise ValueError("all weights must be positive")
        if not self.weight_denominator > self.proposer_weight:
            raise ValueError("weight_denominator must exceed proposer_weight")
        if sum(weights) > self.weight_denominator:
            raise ValueError("weights must not sum past weight_denominator")
        for name in (
            "base_reward_factor",
            "slots_per_epoch",
            "sync_committee_size",
            "epochs_per_sync_period",
            "effective_balance_increment",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_effective_balance < self.effective_balance_increment:
            raise ValueError("max_effective_balance below one increment")

    @property
    def flag_weights(self) -> tuple[int, int, int]:
        return (self.timely_source_weight, self.timely_target_weight, self.timely_head_weight)


DEFAULT_PARAMS = WeightParams()


@dataclass(frozen=True)
class FlagSet:
    source: bool = False
    target: bool = False
    head: bool = False

    @classmethod
    def from_bits(cls, bits: int) -> FlagSet:
        return cls(bool(bits & 1), bool(bits & 2), bool(bits & 4))

    @classmethod
    def all(cls) -> FlagSet:
        return cls(True, True, True)

    def to_bits(self) -> int:
        return int(self.source) | int(self.target) << 1 | int(self.head) << 2

    def missed(self) -> FlagSet:
        return FlagSet(not self.source, not self.target, not self.head)

    def __iter__(self):
        return iter((self.source, self.target, self.head))


@dataclass(frozen=True)
class EpochBalances:
    total_active_balance: Gwei
    attesting_balance_source: Gwei
    attesting_balance_target: Gwei
    attesting_balance_head: Gwei

    def __post_init__(self) -> None:
        if self.total_active_balance <= 0:
            raise RewardDomainError("total_active_balance must be positive")
        for att in self.attesting:
            if not 0 <= att <= self.total_active_balance:
                raise RewardDomainError("attesting balance outside [0, total_active_balance]")

    @classmethod
    def full(cls, total_active_balance: Gwei) -> EpochBalances:
        t = total_active_balance
        return cls(t, t, t, t)

    @property
    def attesting(self) -> tuple[Gwei, Gwei, Gwei]:
        return (
            self.attesting_balance_source,
            self.attesting_balance_target,
            self.attesting_balance_head,
        )


@dataclass(frozen=True)
class TransactionFees:
    gas_used: int
    base_fee_per_gas: Gwei
    priority_fee_per_gas: Gwei


class SlashingAmounts(NamedTuple):
    penalty: Gwei
    proposer_reward: Gwei
    whistleblower_reward: Gwei


class ExecutionReward(NamedTuple):
    tips: Gwei
    burned: Gwei


def integer_sqrt(n: int) -> int:
    """Largest ``r`` with ``r * r <= n`` (Newton iteration)."""
    if n < 0:
        raise RewardDomainError("integer_sqrt of a negative number")
    x = n
    y = (x + 1) // 2
    while y < x:
        x = y
        y = (x + n // x) // 2
    return x


def base_reward_per_increment(total_active_balance: Gwei, params: WeightParams = DEFAULT_PARAMS) -> Gwei:
    if total_active_balance <= 0:
        raise RewardDomainError("total_active_balance must be positive")
    return (
        params.effective_balance_increment
        * params.base_reward_factor
        // integer_sqrt(total_active_balance)
    )


def base_reward(eff_balance: Gwei, total_active_balance: Gwei, params: WeightParams = DEFAULT_PARAMS) -> Gwei:
    """Base reward, evaluated per effective-balance increment and then scaled.

    Floors: ``isqrt(total)``, the per-increment quotient, and
    ``eff_balance // increment``.
    """
    if total_active_balance <= 0:
        raise RewardDomainError("total_active_balance must be positive")
    if total_active_balance < params.effective_balance_increment:
        raise RewardDomainError("total_active_balance below one increment")
    if not 0 <= eff_balance <= params.max_effective_balance:
        raise RewardDomainError("eff_balance outside [0, max_effective_balance]")
    increments = eff_balance // params.effective_balance_increment
    return increments * base_reward_per_increment(total_active_balance, params)


def total_base_rewards(total_active_balance: Gwei, params: WeightParams = DEFAULT_PARAMS) -> Gwei:
    """Sum of base rewards over an active set whose effective balances total
    ``total_active_balance``. Exact because effective balances are whole increments."""
    increments = total_active_balance // params.effective_balance_increment
    return increments * base_reward_per_increment(total_active_balance, params)


def flag_reward(
    flag_weight: int,
    validator_base_reward: Gwei,
    attesting_balance: Gwei,
    total_active_balance: Gwei,
    params: WeightParams = DEFAULT_PARAMS,
) -> Gwei:
    """One floor over ``weight * base * attesting / (denominator * total)``."""
    if total_active_balance <= 0:
        raise RewardDomainError("total_active_balance must be positive")
    return (flag_weight * validator_base_reward * attesting_balance) // (
        params.weight_denominator * total_active_balance
    )


def attestation_reward(
    flags: FlagSet,
    validator_base_reward: Gwei,
    balances: EpochBalances,
    params: WeightParams = DEFAULT_PARAMS,
) -> Gwei:
    total = 0
    for hit, weight, attesting in zip(flags, params.flag_weights, balances.attesting):
        if hit:
            total += flag_reward(weight, validator_base_reward, attesting, balances.total_active_balance, params)
    return total


def attestation_penalty(
    flags_missed: FlagSet,
    validator_base_reward: Gwei,
    params: WeightParams = DEFAULT_PARAMS,
    balances: EpochBalances | None = None,
) -> Gwei:
    """Penalty for missed source/target votes; a missed head vote costs nothing.

    ``balances`` is only consulted when ``params.penalty_scales_with_participation``
    is set.
    """
    penalty = 0
    pairs = (
        (flags_missed.source, params.timely_source_weight, 0),
        (flags_missed.target, params.timely_target_weight, 1),
    )
    for missed, weight, idx in pairs:
        if not missed:
            continue
        if params.penalty_scales_with_participation:
            if balances is None:
                raise RewardDomainError("participation-scaled penalties need epoch balances")
            penalty += flag_reward(
                weight, validator_base_reward, balances.attesting[idx], balances.total_active_balance, params
            )
        else:
            penalty += weight * validator_base_reward // params.weight_denominator
    return penalty


def sync_total_reward(sum_base_rewards: Gwei, params: WeightParams = DEFAULT_PARAMS) -> Gwei:
    return sum_base_rewards * params.sync_reward_weight // params.weight_denominator


def sync_participant_reward(total_sync_reward: Gwei, params: WeightParams = DEFAULT_PARAMS) -> Gwei:
    """Credit per participating slot, and the debit per missed slot."""
    return total_sync_reward // (params.slots_per_epoch * params.sync_committee_size)


def sync_participant_reward_for(total_active_balance: Gwei, params: WeightParams = DEFAULT_PARAMS) -> Gwei:
    return sync_participant_reward(sync_total_reward(total_base_rewards(total_active_balance, params), params), params)


def proposer_attestation_component(sum_weighted_base: Gwei, params: WeightParams = DEFAULT_PARAMS) -> Gwei:
    """``sum_weighted_base`` is the sum of ``base_reward * flag_weight`` over
    flags newly set by the block's votes. One floor per block."""
    p = params.proposer_weight
    d = params.weight_denominator
    return sum_weighted_base * p // ((d - p) * d)


def proposer_sync_component(
    included_sync_signatures: int,
    participant_reward: Gwei,
    params: WeightParams = DEFAULT_PARAMS,
) -> Gwei:
    if not 0 <= included_sync_signatures <= params.sync_committee_size:
        raise RewardDomainError("signature count outside [0, sync_committee_size]")
    p = params.proposer_weight
    per_signature = participant_reward * p // (params.weight_denominator - p)
    return included_sync_signatures * per_signature


def proposer_reward(att_component: Gwei, sync_component: Gwei) -> Gwei:
    return att_component + sync_component


def slashing_amounts(eff_balance: Gwei, params: WeightParams = DEFAULT_PARAMS) -> SlashingAmounts:
    if not 0 <= eff_balance <= params.max_effective_balance:
        raise RewardDomainError("eff_balance outside [0, max_effective_balance]")
    penalty = eff_balance // SLASHING_PENALTY_QUOTIENT
    proposer = eff_balance * params.proposer_weight // (WHISTLEBLOWER_REWARD_QUOTIENT * params.weight_denominator)
    whistleblower = eff_balance // WHISTLEBLOWER_REWARD_QUOTIENT - proposer
    return SlashingAmounts(penalty, proposer, whistleblower)


def el_proposer_reward(
    transactions: Iterable[TransactionFees],
    block_gas_limit: int = DEFAULT_BLOCK_GAS_LIMIT,
) -> ExecutionReward:
    """Priority fees go to the proposer; base fees are burned."""
    tips = burned = gas = 0
    for tx in transactions:
        if tx.gas_used < 0 or tx.base_fee_per_gas < 0 or tx.priority_fee_per_gas < 0:
            raise RewardDomainError("negative transaction field")
        gas += tx.gas_used
        tips += tx.gas_used * tx.priority_fee_per_gas
        burned += tx.gas_used * tx.base_fee_per_gas
    if gas > block_gas_limit:
        raise RewardDomainError(f"block uses {gas} gas, limit is {block_gas_limit}")
    if tips > UINT64_MAX or burned > UINT64_MAX:
        raise RewardDomainError("fee total overflows 64-bit Gwei")
    return ExecutionReward(tips, burned)


def max_epoch_reward(
    eff_balance: Gwei,
    total_active_balance: Gwei,
    balances: EpochBalances,
    in_sync_committee: bool,
    params: WeightParams = DEFAULT_PARAMS,
) -> Gwei:
    """Maximum extractable reward: all three flags plus a full epoch of sync
    duty. Proposer and execution-layer income are excluded."""
    base = base_reward(eff_balance, total_active_balance, params)
    mer = attestation_reward(FlagSet.all(), base, balances, params)
    if in_sync_committee:
        mer += params.slots_per_epoch * sync_participant_reward_for(total_active_balance, params)
    return mer
