"""One test per acceptance criterion; the run ends with a PASS/FAIL line each."""

import filecmp
import random
import socket
import threading
import time
from fractions import Fraction
from pathlib import Path

import pytest
import uvicorn
from fastapi.testclient import TestClient

import oracle
from beacon_rewards import rewards as rm
from beacon_rewards.analyzer import compute_mer_ratio, process_range, reconcile
from beacon_rewards.chain_sim import FaultProfile, SimConfig, SlashingEvent, block_presence
from beacon_rewards.cli import EXIT_OK, main
from beacon_rewards.entities import EntityMap
from beacon_rewards.metrics import (
    entity_streaks,
    missed_blocks_compare,
    missed_flags_series,
    proposals_frequency,
    streaks_from_sequence,
)
from beacon_rewards.service import create_app
from beacon_rewards.sources import FileProvider, HttpProvider, SimProvider, write_fixtures
from beacon_rewards.store import BlockRow, Store

ETH = 10**9
DEMO = Path(__file__).resolve().parents[1] / "configs" / "demo.yaml"

MIXED = SimConfig(
    seed=2024,
    validator_count=64,
    epochs=50,
    p_missed_block=0.05,
    p_missed_source=0.02,
    p_missed_target=0.03,
    p_missed_head=0.06,
    p_sync_miss=0.04,
    el_tip_distribution=(0, 5_000_000),
    fault_profiles=[
        FaultProfile(validators=list(range(10)), first_epoch=12, last_epoch=15),
        FaultProfile(validators=[40, 41], first_epoch=30, p_miss=0.5),
    ],
    slashings=[SlashingEvent(slot=700, validator_index=50), SlashingEvent(slot=1201, validator_index=51, whistleblower_index=3)],
)


@pytest.fixture(scope="module")
def mixed_run(tmp_path_factory):
    provider = SimProvider(MIXED)
    store = Store(tmp_path_factory.mktemp("mixed") / "store")
    started = time.perf_counter()
    process_range(provider, 0, MIXED.epochs - 2, EntityMap(), store)
    return provider, store, time.perf_counter() - started


# -- 1 ------------------------------------------------------------------------


@pytest.mark.criterion(1, "reward core matches the rational oracle on 1,000 inputs per operation")
def test_ac1_oracle_equivalence():
    rng = random.Random(1)
    started = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        total = rng.randint(ETH, 10**6 * 32 * ETH)
        eff = rng.randint(0, 32) * ETH
        base = rm.base_reward(eff, total)
        mismatches += base != oracle.base_reward(eff, total)

        att = [rng.randint(0, total) for _ in range(3)]
        balances = rm.EpochBalances(total, *att)
        w = rng.choice(oracle.FLAG_WEIGHTS)
        i = oracle.FLAG_WEIGHTS.index(w)
        mismatches += rm.flag_reward(w, base, att[i], total) != oracle.flag_reward(w, base, att[i], total)

        flags = rm.FlagSet.from_bits(rng.randint(0, 7))
        mismatches += rm.attestation_reward(flags, base, balances) != oracle.attestation_reward(
            tuple(flags), base, att, total
        )
        mismatches += rm.attestation_penalty(flags, base) != oracle.attestation_penalty(tuple(flags), base)

        base_sum = rng.randint(0, 10**16)
        sync_total = rm.sync_total_reward(base_sum)
        mismatches += sync_total != oracle.sync_total(base_sum)
        participant = rm.sync_participant_reward(sync_total)
        mismatches += participant != oracle.sync_participant(sync_total)

        weighted = rng.randint(0, 10**15)
        count = rng.randint(0, 512)
        pa = rm.proposer_attestation_component(weighted)
        ps = rm.proposer_sync_component(count, participant)
        mismatches += pa != oracle.proposer_att(weighted)
        mismatches += ps != oracle.proposer_sync(count, participant)
        mismatches += rm.proposer_reward(pa, ps) != oracle.proposer_att(weighted) + oracle.proposer_sync(count, participant)

        slashed = rng.randint(0, 32 * ETH)
        mismatches += tuple(rm.slashing_amounts(slashed)) != oracle.slashing(slashed)

        txs = [(rng.randint(21_000, 1_000_000), rng.randint(0, 100 * ETH), rng.randint(0, 3 * ETH)) for _ in range(5)]
        mismatches += tuple(rm.el_proposer_reward([rm.TransactionFees(*t) for t in txs])) != oracle.el_reward(txs)
    elapsed = time.perf_counter() - started
    assert mismatches == 0
    assert elapsed < 10, f"{elapsed:.1f}s"


# -- 2 ------------------------------------------------------------------------


@pytest.mark.criterion(2, "slashing penalty and side rewards are exact")
def test_ac2_slashing_triad():
    rng = random.Random(2)
    for _ in range(1000):
        eff = rng.randint(0, 32 * ETH)
        s = rm.slashing_amounts(eff)
        assert s.penalty == eff // 32
        assert s.proposer_reward + s.whistleblower_reward == eff // 512
    assert rm.slashing_amounts(32 * ETH).penalty == ETH


# -- 3 ------------------------------------------------------------------------


@pytest.mark.criterion(3, "64 validators x 50 epochs with mixed faults reconcile to 0 Gwei")
def test_ac3_conservation(mixed_run):
    provider, store, elapsed = mixed_run
    assert reconcile(store, provider, 0, MIXED.epochs - 2) == []

    # slot by slot, every Gwei moved is one the simulator booked
    sim = provider.simulator
    drift = 0
    for slot in range(1, MIXED.epochs * 32):
        moved = sum(provider.get_state(slot).balances) - sum(provider.get_state(slot - 1).balances)
        drift += abs(moved - sim.state.applied.get(slot, 0))
    assert drift == 0
    assert sim.state.penalty_shortfall == 0
    assert len(store.all_slashings()) == 2
    assert elapsed < 30, f"{elapsed:.1f}s"


# -- 4 ------------------------------------------------------------------------


@pytest.mark.criterion(4, "achieved <= MER on every row; a perfect run scores exactly 1")
def test_ac4_mer_dominance_and_perfection(mixed_run, tmp_path):
    _, store, _ = mixed_run
    rows = store.all_rows()
    assert all(r.att_reward <= r.att_max and r.achieved <= r.maximum for r in rows)
    assert compute_mer_ratio(rows) < 1

    perfect = SimConfig(seed=4, validator_count=64, epochs=20, el_tip_distribution=(0, 10**6))
    clean = process_range(SimProvider(perfect), 0, 18, EntityMap(), Store(tmp_path / "perfect"))
    assert compute_mer_ratio(clean.all_rows()) == Fraction(1)
    assert all(p.total == p.source == p.target == p.head == 0 for p in missed_flags_series(clean))


# -- 5 ------------------------------------------------------------------------


@pytest.mark.slow
@pytest.mark.criterion(5, "configured flag miss rates recovered within 0.5% over 1e5 validator-epochs")
def test_ac5_fault_rate_fidelity(tmp_path):
    cfg = SimConfig(seed=5, validator_count=1024, epochs=102,
                    p_missed_source=0.008, p_missed_target=0.008, p_missed_head=0.033)
    store = process_range(SimProvider(cfg), 0, 100, EntityMap(), Store(tmp_path / "store"))
    rows = store.all_rows()
    assert len(rows) >= 10**5
    n = len(rows)
    rates = {
        "source": sum(not r.flag_source for r in rows) / n,
        "target": sum(not r.flag_target for r in rows) / n,
        "head": sum(not r.flag_head for r in rows) / n,
    }
    series = missed_flags_series(rows)
    assert sum(p.head for p in series) / len(series) == pytest.approx(rates["head"])
    for name, expected in (("source", 0.008), ("target", 0.008), ("head", 0.033)):
        assert abs(rates[name] - expected) <= 0.005, (name, rates[name])


# -- 6 ------------------------------------------------------------------------


@pytest.mark.slow
@pytest.mark.criterion(6, "1.13% -> 0.72% block misses give a 36.4% +- 3 reduction")
def test_ac6_missed_block_reduction():
    per_side = 31_250  # epochs, 10^6 slots
    cfg = SimConfig(seed=6, p_missed_block=0.0113, block_miss_schedule=[(per_side, 0.0072)])

    def blocks():
        for epoch in range(2 * per_side):
            for i, proposed in enumerate(block_presence(cfg, epoch)):
                yield BlockRow(epoch * 32 + i, epoch, 0, proposed, 0, 0, "Other")

    mb = missed_blocks_compare(blocks(), per_side)
    assert mb.before_slots == mb.after_slots == 10**6
    assert abs(100 * mb.reduction - 36.4) <= 3.0, mb


# -- 7 ------------------------------------------------------------------------


@pytest.mark.slow
@pytest.mark.criterion(7, "2,000 validators at ~0.517 proposals each: 0-or-1 bucket is 90% +- 2")
def test_ac7_proposal_frequency(tmp_path):
    cfg = SimConfig(seed=7, validator_count=2000, epochs=33)
    store = process_range(SimProvider(cfg), 0, 31, EntityMap(), Store(tmp_path / "store"))
    hist = proposals_frequency(store)
    n = sum(hist.values())
    lam = sum(k * c for k, c in hist.items()) / n
    share = (hist.get(0, 0) + hist.get(1, 0)) / n
    assert n == 2000 and abs(lam - 0.517) < 0.01
    assert abs(share - 0.90) <= 0.02
    assert abs(share - oracle.poisson_at_most_one(lam)) <= 0.02


# -- 8 ------------------------------------------------------------------------


@pytest.mark.criterion(8, "entity streaks equal a brute-force scan on 100 sequences of 1e4")
def test_ac8_streak_oracle():
    rng = random.Random(8)
    names = ["Lido", "Coinbase", "Kraken", "Other"]
    mismatches = 0
    for _ in range(100):
        weights = [rng.random() for _ in names]
        seq = rng.choices(names + [None], weights=weights + [0.05], k=10**4)
        mismatches += streaks_from_sequence(seq) != oracle.brute_force_streaks(seq)
        em = EntityMap(validator_entities={i: n for i, n in enumerate(names[:-1])})
        blocks = [
            BlockRow(s, s // 32, names.index(lab) if lab else 0, lab is not None, 0, 0, lab or "Other")
            for s, lab in enumerate(seq)
        ]
        expected = oracle.brute_force_streaks([lab if lab != "Other" else None for lab in seq])
        mismatches += entity_streaks(blocks, em) != expected
    assert mismatches == 0


# -- 9 ------------------------------------------------------------------------


def _files(root: Path) -> list[Path]:
    return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file())


@pytest.mark.criterion(9, "a fixed seed reproduces store and report byte for byte")
def test_ac9_determinism(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["full", "--config", str(DEMO), "--out", str(a)]) == EXIT_OK
    assert main(["full", "--config", str(DEMO), "--out", str(b)]) == EXIT_OK
    capsys.readouterr()
    for sub in ("store", "report"):
        names = _files(a / sub)
        assert names and names == _files(b / sub)
        _, mismatch, errors = filecmp.cmpfiles(a / sub, b / sub, [str(n) for n in names], shallow=False)
        assert mismatch == [] and errors == []
    assert _files(a) == _files(b)
    assert (a / "config.yaml").read_bytes() == (b / "config.yaml").read_bytes()


# -- 10 -----------------------------------------------------------------------


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


@pytest.mark.criterion(10, "sim, file and HTTP providers give identical analyzer output")
def test_ac10_backend_equivalence(tmp_path):
    cfg = SimConfig(seed=10, epochs=12, p_missed_block=0.08, p_missed_head=0.05, p_sync_miss=0.03,
                    el_tip_distribution=(0, 10**6), slashings=[SlashingEvent(slot=130, validator_index=9)])
    sim = SimProvider(cfg)
    states = tmp_path / "states"
    write_fixtures((sim.get_state(s) for s in range(12 * 32)), states)

    def analyze(provider, name):
        return process_range(provider, 0, 10, EntityMap(), Store(tmp_path / name))

    stores = {
        "sim": analyze(sim, "sim"),
        "files": analyze(FileProvider(states), "files"),
        "testclient": analyze(HttpProvider(client=TestClient(create_app(FileProvider(states)))), "testclient"),
    }

    port = _free_port()
    server = uvicorn.Server(uvicorn.Config(create_app(FileProvider(states)), host="127.0.0.1", port=port,
                                           log_level="warning"))
    thread = threading.Thread(target=server.run, daemon=True)
    thread.start()
    try:
        deadline = time.monotonic() + 10
        while not server.started and time.monotonic() < deadline:
            time.sleep(0.02)
        live = HttpProvider(f"http://127.0.0.1:{port}")
        stores["http"] = analyze(live, "http")
        live.close()
    finally:
        server.should_exit = True
        thread.join(timeout=10)

    digests = {name: s.digest() for name, s in stores.items()}
    assert len(set(digests.values())) == 1, digests
    reference = (tmp_path / "sim" / "rows.csv").read_bytes()
    assert all((tmp_path / name / "rows.csv").read_bytes() == reference for name in stores)
