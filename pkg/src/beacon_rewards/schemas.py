"""Wire models for beacon-state snapshots and the state API."""

from __future__ import annotations

from pydantic import BaseModel, ConfigDict, Field


class BlockRecord(BaseModel):
    """One slot of the current epoch as seen from the state.

    ``attestations`` holds ``[validator_index, new_flag_bits]`` pairs: the
    participation bits this block set for the first time.
    ``slashings`` holds ``[slashed_index, whistleblower_index]`` pairs.
    """

    model_config = ConfigDict(frozen=True)

    slot: int
    proposer_index: int
    block_proposed: bool
    sync_participation: str = "0x"
    el_tips: int = 0
    attestations: list[tuple[int, int]] = Field(default_factory=list)
    slashings: list[tuple[int, int]] = Field(default_factory=list)


class BeaconStateSnapshot(BaseModel):
    """State after processing ``slot`` and before any epoch transition.

    ``participation_flags`` covers the current epoch (3 bits per validator:
    source=1, target=2, head=4); ``previous_participation_flags`` the epoch
    before it, whose inclusion window is closed at the last slot of the epoch.
    """

    model_config = ConfigDict(frozen=True)

    slot: int
    balances: list[int]
    effective_balances: list[int]
    block_proposed: bool
    proposer_index: int
    participation_flags: list[int]
    sync_participation: str
    el_tips: int
    previous_participation_flags: list[int]
    activation_epochs: list[int]
    exit_epochs: list[int]
    slashed: list[bool]
    sync_committee: list[int]
    epoch_blocks: list[BlockRecord]

    def epoch(self, slots_per_epoch: int = 32) -> int:
        return self.slot // slots_per_epoch

    def is_active(self, index: int, epoch: int) -> bool:
        return self.activation_epochs[index] <= epoch < self.exit_epochs[index]

    def active_indices(self, epoch: int) -> list[int]:
        return [i for i in range(len(self.balances)) if self.is_active(i, epoch)]


class SlotRange(BaseModel):
    first_slot: int
    last_slot: int


def encode_bits(bits: list[bool] | tuple[bool, ...]) -> str:
    """Little-endian bitvector as ``0x``-prefixed hex (SSZ Bitvector layout)."""
    out = bytearray((len(bits) + 7) // 8)
    for i, b in enumerate(bits):
        if b:
            out[i // 8] |= 1 << (i % 8)
    return "0x" + out.hex()


def decode_bits(hexstr: str, length: int) -> list[bool]:
    raw = bytes.fromhex(hexstr[2:] if hexstr.startswith("0x") else hexstr)
    if len(raw) * 8 < length:
        raw = raw + bytes(((length + 7) // 8) - len(raw))
    return [bool(raw[i // 8] >> (i % 8) & 1) for i in range(length)]
