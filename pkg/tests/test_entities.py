import pytest

from beacon_rewards.entities import OTHER, EntityMap, EntityMapError, build_map, normalize_address, write_synthetic


def _write(tmp_path, deposits, entities):
    d = tmp_path / "deposits.csv"
    e = tmp_path / "entities.csv"
    d.write_text("validator_index,deposit_address\n" + "".join(f"{v},{a}\n" for v, a in deposits))
    e.write_text("deposit_address,entity_name\n" + "".join(f"{a},{n}\n" for a, n in entities))
    return d, e


def test_empty_entities_file_maps_everything_to_other(tmp_path):
    d, e = _write(tmp_path, [(0, "0xaa"), (1, "0xbb")], [])
    m = build_map(d, e)
    assert m.resolve(0) == m.resolve(1) == OTHER
    assert m.resolve(99) == OTHER


def test_shared_address(tmp_path):
    d, e = _write(tmp_path, [(0, "0xAA"), (1, "aa"), (2, "0xbb")], [("0xaa", "Lido")])
    m = build_map(d, e)
    assert m.resolve(0) == m.resolve(1) == "Lido"
    assert m.resolve(2) == OTHER


def test_shares_leave_remainder_to_other(tmp_path):
    write_synthetic(tmp_path, 1000, {"A": 0.30, "B": 0.20, "C": 0.14}, seed=3)
    m = build_map(tmp_path / "deposits.csv", tmp_path / "entities.csv")
    shares = m.shares(1000)
    assert shares == pytest.approx({"A": 0.30, "B": 0.20, "C": 0.14, OTHER: 0.36})
    assert m.entities() == ["A", "B", "C", OTHER]


def test_malformed_row_reports_line(tmp_path):
    d, e = _write(tmp_path, [(0, "0xaa"), ("x", "0xbb")], [])
    with pytest.raises(EntityMapError, match=r"deposits.csv:3"):
        build_map(d, e)


def test_wrong_field_count_reports_line(tmp_path):
    d, e = _write(tmp_path, [], [("0xaa", "Lido")])
    e.write_text(e.read_text() + "0xbb\n")
    with pytest.raises(EntityMapError, match=r"entities.csv:3"):
        build_map(d, e)


def test_bad_header(tmp_path):
    d, e = _write(tmp_path, [], [])
    d.write_text("index,address\n")
    with pytest.raises(EntityMapError, match="header"):
        build_map(d, e)


def test_address_with_two_entities(tmp_path):
    d, e = _write(tmp_path, [], [("0xaa", "Lido"), ("0xAA", "Kraken")])
    with pytest.raises(EntityMapError, match="two entities"):
        build_map(d, e)


def test_validator_with_two_entities(tmp_path):
    d, e = _write(tmp_path, [(0, "0xaa"), (0, "0xbb")], [("0xaa", "Lido"), ("0xbb", "Kraken")])
    with pytest.raises(EntityMapError, match="validator 0"):
        build_map(d, e)


def test_normalize_address():
    assert normalize_address(" 0xABcd ") == "0xabcd"
    assert normalize_address("abcd") == "0xabcd"
    with pytest.raises(EntityMapError):
        normalize_address("0xzz")


def test_empty_map():
    assert EntityMap().resolve(3) == OTHER
    assert EntityMap().entities() == [OTHER]
