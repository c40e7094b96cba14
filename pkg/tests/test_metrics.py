from collections import Counter

import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracle
from beacon_rewards.analyzer import process_range
from beacon_rewards.chain_sim import FaultProfile, SimConfig
from beacon_rewards.entities import OTHER, EntityMap, build_map, write_synthetic
from beacon_rewards.metrics import (
    NETWORK,
    MetricError,
    block_share_per_entity,
    cumulative_streaks,
    entity_streaks,
    mer_per_entity,
    missed_blocks_compare,
    missed_flags_series,
    mer_series,
    proposals_frequency,
    reward_decomposition,
    streaks_from_sequence,
    write_report,
)
from beacon_rewards.sources import SimProvider
from beacon_rewards.store import BlockRow, Store


def _store(config, tmp_path, entity_map=EntityMap()):
    store = Store(tmp_path / "store")
    return process_range(SimProvider(config), 0, config.epochs - 2, entity_map, store)


def _entities(tmp_path, count, shares, seed=0):
    write_synthetic(tmp_path / "ent", count, shares, seed=seed)
    return build_map(tmp_path / "ent" / "deposits.csv", tmp_path / "ent" / "entities.csv")


def test_offline_spike_shows_in_series(tmp_path):
    cfg = SimConfig(seed=1, validator_count=100, epochs=10,
                    fault_profiles=[FaultProfile(validators=list(range(27)), first_epoch=5, last_epoch=5)])
    series = {p.epoch: p for p in missed_flags_series(_store(cfg, tmp_path))}
    spike = series[5]
    assert (spike.source, spike.target, spike.head) == (0.27, 0.27, 0.27)
    assert spike.total == pytest.approx(0.81)
    assert all(p.total == 0 for e, p in series.items() if e != 5)


def test_source_and_target_track_each_other(tmp_path):
    cfg = SimConfig(seed=2, validator_count=256, epochs=30, p_missed_source=0.008, p_missed_target=0.008,
                    p_missed_head=0.033)
    series = missed_flags_series(_store(cfg, tmp_path))
    s = sum(p.source for p in series) / len(series)
    t = sum(p.target for p in series) / len(series)
    h = sum(p.head for p in series) / len(series)
    assert abs(s - t) < 0.004
    assert h > 3 * max(s, t)


def test_decomposition_without_tips(tmp_path):
    cfg = SimConfig(seed=3, epochs=6, p_missed_head=0.05)
    shares = reward_decomposition(_store(cfg, tmp_path))
    assert shares["el"] == 0
    assert sum(shares.values()) == pytest.approx(1.0)
    # sync pay scales with committee size, which is tiny here
    assert shares["attestation"] > shares["proposer_cl"] > shares["sync"] > 0


def test_proposals_histogram_recount(tmp_path):
    cfg = SimConfig(seed=4, validator_count=200, epochs=12, p_missed_block=0.1)
    store = _store(cfg, tmp_path)
    hist = proposals_frequency(store)
    per_validator = Counter()
    for b in store.all_blocks():
        if b.proposed:
            per_validator[b.proposer_index] += 1
    recount = Counter(per_validator[v] for v in range(200))
    assert hist == {k: recount.get(k, 0) for k in range(max(recount) + 1)}
    assert sum(hist.values()) == 200


labels = st.lists(st.one_of(st.none(), st.sampled_from("ABC")), max_size=200)


@given(labels)
def test_streaks_match_brute_force(seq):
    assert streaks_from_sequence(seq) == oracle.brute_force_streaks(seq)


def test_streak_examples():
    assert streaks_from_sequence(["A", "A", "A", "B", "A", "A", None, "A", "A"]) == {"A": {2: 2, 3: 1}}
    assert cumulative_streaks({"A": {2: 2, 4: 1}}) == {"A": {2: 3, 3: 1, 4: 1}}


def test_entity_streaks_skip_missed_and_other():
    em = EntityMap(validator_entities={1: "X", 2: "X", 3: OTHER})
    blocks = [
        BlockRow(0, 0, 1, True, 0, 0, "X"),
        BlockRow(1, 0, 2, True, 0, 0, "X"),
        BlockRow(2, 0, 1, False, 0, 0, "X"),
        BlockRow(3, 0, 1, True, 0, 0, "X"),
        BlockRow(4, 0, 3, True, 0, 0, OTHER),
        BlockRow(5, 0, 3, True, 0, 0, OTHER),
    ]
    assert entity_streaks(blocks, em) == {"X": {2: 1}}
    assert entity_streaks(blocks, em, include_other=True) == {"X": {2: 1}, OTHER: {2: 1}}


def test_mer_per_entity_closed_form(tmp_path):
    p = 0.058
    em = _entities(tmp_path, 200, {"Slow": 0.25, "Fast": 0.25}, seed=5)
    slow = [v for v in range(200) if em.resolve(v) == "Slow"]
    cfg = SimConfig(seed=5, validator_count=200, epochs=40, fault_profiles=[FaultProfile(validators=slow, p_miss=p)])
    store = _store(cfg, tmp_path, em)
    per = mer_per_entity(store, em)
    rows = [r for r in store.all_rows() if r.entity == "Slow"]
    a = sum(r.att_max for r in rows)
    s = sum(r.sync_max for r in rows)
    expected = (a * (1 - p) + s * (1 - 2 * p)) / (a + s)
    assert per["Slow"].ratio == pytest.approx(expected, abs=0.005)
    assert per["Fast"].ratio == 1.0
    assert per["Slow"].ratio < per[NETWORK].ratio < 1.0


def test_block_share_tracks_validator_share(tmp_path):
    em = _entities(tmp_path, 100, {"Big": 0.30, "Small": 0.06}, seed=6)
    cfg = SimConfig(seed=6, validator_count=100, epochs=100)
    shares = block_share_per_entity(_store(cfg, tmp_path, em), em)
    assert shares["Big"] == pytest.approx(0.30, abs=0.03)
    assert shares["Small"] == pytest.approx(0.06, abs=0.015)
    assert shares[OTHER] == pytest.approx(0.64, abs=0.03)


def test_missed_blocks_compare():
    def blocks(epoch, missed):
        return [BlockRow(epoch * 32 + i, epoch, 0, i >= missed, 0, 0, OTHER) for i in range(32)]

    rows = blocks(0, 4) + blocks(1, 4) + blocks(2, 1) + blocks(3, 3)
    mb = missed_blocks_compare(rows, 2)
    assert (mb.before_ratio, mb.after_ratio) == (8 / 64, 4 / 64)
    assert mb.reduction == pytest.approx(0.5)
    with pytest.raises(MetricError):
        missed_blocks_compare(rows, 9)
    with pytest.raises(MetricError):
        missed_blocks_compare(blocks(0, 0) + blocks(1, 2), 1)


def test_report_files(tmp_path):
    em = _entities(tmp_path, 64, {"A": 0.5}, seed=7)
    cfg = SimConfig(seed=7, epochs=8, p_missed_block=0.2, el_tip_distribution=(0, 1000))
    store = _store(cfg, tmp_path, em)
    summary = write_report(store, em, tmp_path / "report", split_epoch=3)
    names = {p.name for p in (tmp_path / "report").iterdir()}
    for stem in ("missed_flags", "mer_series", "missed_blocks", "reward_decomposition",
                 "proposals_frequency", "entity_streaks", "mer_per_entity", "block_share"):
        assert f"{stem}.csv" in names and f"{stem}.json" in names
    text = summary.read_text()
    assert "network MER ratio" in text
    assert len(mer_series(store)) == 7
    with pytest.raises(MetricError):
        write_report(store, em, tmp_path / "r2", reports=["nope"])
