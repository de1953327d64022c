import json

import pytest

from app.config import (
    ConfigError,
    AddressError,
    access_latency,
    address_of,
    default_workload,
    latency_table,
    list_presets,
    load_config,
    load_preset,
    locate,
    parse_config,
)
from app.models import BankLocation, ClusterConfig, WorkloadConfig


def test_full_scale_preset_dimensions():
    cfg = load_preset("terapool-1-3-5-9")
    assert cfg.total_cores == 1024
    assert cfg.total_tiles == 128
    assert cfg.total_banks == 4096
    assert cfg.l1_bytes == 4 * 1024 * 1024


def test_desk_preset_dimensions():
    cfg = load_preset("desk-256")
    assert cfg.total_cores == 256
    assert cfg.total_banks == 1024
    assert cfg.l1_bytes == 1024 * 1024


def test_every_variant_is_a_preset():
    names = list_presets()
    for x in (7, 9, 11):
        assert f"terapool-1-3-5-{x}" in names
        assert load_preset(f"terapool-1-3-5-{x}").latency_remote == x


def test_locate_word_interleaving():
    cfg = load_preset("terapool-1-3-5-9")
    assert locate(cfg, 0) == BankLocation(tile_index=0, bank_in_tile=0, word_offset=0)
    assert locate(cfg, 4) == BankLocation(tile_index=0, bank_in_tile=1, word_offset=0)
    assert locate(cfg, 4 * 32) == BankLocation(tile_index=1, bank_in_tile=0, word_offset=0)
    assert locate(cfg, cfg.total_banks * 4) == BankLocation(tile_index=0, bank_in_tile=0, word_offset=1)


def test_locate_last_word_and_bounds():
    cfg = load_preset("terapool-1-3-5-9")
    last = locate(cfg, cfg.l1_bytes - 4)
    assert last.tile_index == cfg.total_tiles - 1
    assert last.bank_in_tile == cfg.banks_per_tile - 1
    assert last.word_offset == cfg.bank_words - 1
    with pytest.raises(AddressError):
        locate(cfg, cfg.l1_bytes)
    with pytest.raises(AddressError):
        locate(cfg, 2)


def test_locate_is_a_bijection_on_tiny_cluster():
    cfg = load_preset("tiny-32")
    seen = set()
    for addr in range(0, cfg.l1_bytes, 4):
        loc = locate(cfg, addr)
        assert address_of(cfg, loc) == addr
        seen.add((loc.tile_index, loc.bank_in_tile, loc.word_offset))
    assert len(seen) == cfg.l1_bytes // 4


def test_access_latency_classes():
    cfg = load_preset("terapool-1-3-5-9")
    tile_words = cfg.banks_per_tile * 4
    assert access_latency(cfg, 0, 0) == 1
    assert access_latency(cfg, 0, tile_words * 1) == 3
    assert access_latency(cfg, 0, tile_words * cfg.tiles_per_subgroup) == 5
    assert access_latency(cfg, 0, tile_words * cfg.tiles_per_group) == 9


def test_latency_table_is_symmetric_with_fixed_diagonal():
    cfg = load_preset("tiny-32")
    table = latency_table(cfg)
    for a in range(cfg.total_tiles):
        assert table[a][a] == cfg.latency_tile
        for b in range(cfg.total_tiles):
            assert table[a][b] == table[b][a]


def test_with_variant_renames_and_retimes():
    cfg = load_preset("terapool-1-3-5-9")
    v11 = cfg.with_variant(11, 924e6)
    assert v11.name == "terapool-1-3-5-11"
    assert v11.latency_remote == 11
    assert v11.frequency_hz == 924e6
    assert cfg.latency_remote == 9


def test_non_power_of_two_rejected():
    with pytest.raises(ConfigError, match="cores_per_tile"):
        parse_config(json.dumps({"preset": "tiny-32", "cores_per_tile": 6}))


def test_latency_must_grow_with_distance():
    with pytest.raises(ConfigError, match="latencies must grow"):
        parse_config(json.dumps({"preset": "tiny-32", "latency_group": 2}))


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config(json.dumps({"preset": "tiny-32", "bogus": 1}))


def test_bad_json_reports_position():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("{nope")


def test_preset_override_merges_hbm():
    cfg = parse_config(json.dumps({"preset": "desk-256", "hbm": {"avg_latency": 40}}))
    assert cfg.hbm.avg_latency == 40
    assert cfg.hbm.channels == 16
    assert cfg.total_cores == 256


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read config"):
        load_config(tmp_path / "missing.json")


def test_preset_directory_env(tmp_path, monkeypatch):
    (tmp_path / "lab.json").write_text(json.dumps({"preset": "tiny-32", "name": "lab", "latency_remote": 7}))
    monkeypatch.setenv("CLUSTERSIM_PRESET_DIR", str(tmp_path))
    assert "lab" in list_presets()
    cfg = load_preset("lab")
    assert cfg.name == "lab"
    assert cfg.latency_remote == 7


def test_unknown_preset():
    with pytest.raises(ConfigError, match="unknown preset"):
        load_preset("nope")


def test_default_workload_scales_with_cluster():
    assert default_workload(load_preset("terapool-1-3-5-9")).fft_size == 4096
    desk = default_workload(load_preset("desk-256"))
    assert (desk.n_antennas, desk.n_beams, desk.n_tx, desk.fft_size, desk.n_subcarriers) == (16, 8, 2, 1024, 408)
    assert default_workload(load_preset("tiny-32")).fft_size == 64


def test_workload_validation():
    with pytest.raises(ValueError):
        WorkloadConfig(fft_size=1000)
    with pytest.raises(ValueError):
        WorkloadConfig(n_tx=8, n_beams=4, n_antennas=16)
    with pytest.raises(ConfigError):
        default_workload(load_preset("tiny-32"), fft_size=32)


def test_config_is_immutable():
    cfg = ClusterConfig()
    with pytest.raises(Exception):
        cfg.latency_remote = 11
