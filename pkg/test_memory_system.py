import numpy as np
import pytest

from app.config import AddressError, hbm_preset, load_preset
from app.models import HbmConfig
from app.sim.bench import hbm_stream
from app.sim.dma import Burst
from app.sim.memory import (
    BurstRecord,
    HbmCapacityError,
    HbmModel,
    IdealMemory,
    L1Store,
    MainMemoryStore,
    ScrambleMap,
    channel_loads,
    hbm_sustained_bandwidth,
    make_main_memory,
    scramble,
)
from app.utils import KIB, MIB

SMALL_HBM = HbmConfig(channels=4, peak_bytes_per_cycle=64, avg_latency=20, burst_bytes=64, capacity=64 * MIB)


def test_scramble_is_a_bijection_over_one_period():
    hbm = hbm_preset("hbm2e-910")
    smap = ScrambleMap.for_hbm(hbm)
    period = hbm.burst_bytes * hbm.channels
    span = range(0, period * hbm.channels, hbm.burst_bytes)
    images = {smap.scramble(a) for a in span}
    assert len(images) == len(span)
    for a in span:
        assert smap.unscramble(smap.scramble(a)) == a


def test_scramble_balances_channels():
    hbm = hbm_preset("hbm2e-910")
    smap = ScrambleMap.for_hbm(hbm)
    period = hbm.burst_bytes * hbm.channels
    channels = [smap.channel(a) for a in range(0, period, hbm.burst_bytes)]
    assert sorted(channels) == list(range(hbm.channels))


def test_unscrambled_linear_addresses_alias_one_channel():
    hbm = hbm_preset("hbm2e-910")
    smap = ScrambleMap.for_hbm(hbm, enabled=False)
    assert {smap.channel(a) for a in range(0, 16 * MIB, hbm.burst_bytes)} == {0}
    assert scramble(smap, 12345 * 4) == 12345 * 4


def test_scramble_keeps_burst_offset():
    smap = ScrambleMap.for_hbm(SMALL_HBM)
    for a in (0, 4, 60, 64 + 12, 3 * 64 + 32):
        assert smap.scramble(a) % 64 == a % 64


def test_scramble_out_of_range():
    smap = ScrambleMap.for_hbm(SMALL_HBM)
    with pytest.raises(HbmCapacityError):
        smap.scramble(SMALL_HBM.capacity)


def test_scramble_is_a_bijection_on_random_addresses():
    smap = ScrambleMap.for_hbm(SMALL_HBM)
    rng = np.random.default_rng(11)
    addrs = {int(a) for a in rng.integers(0, SMALL_HBM.capacity, size=4096)}
    images = {smap.scramble(a) for a in addrs}
    assert len(images) == len(addrs)
    assert all(0 <= p < SMALL_HBM.capacity for p in images)
    assert all(smap.unscramble(smap.scramble(a)) == a for a in addrs)


def test_single_burst_latency():
    model = HbmModel(SMALL_HBM)
    service_end, completion = model.submit(100, 0, 64, 0)
    assert service_end == 100 + 64 // SMALL_HBM.per_channel_bytes_per_cycle
    assert completion == service_end + 20


def test_channel_queue_serializes_service():
    model = HbmModel(SMALL_HBM)
    first = model.submit(0, 1, 64, 0)
    second = model.submit(0, 1, 64, 64)
    other = model.submit(0, 2, 64, 128)
    assert second[0] == first[0] + 4
    assert other == first


def test_hbm_submit_stamps_the_burst():
    model = HbmModel(SMALL_HBM)
    burst = Burst(src=128, dst=0, bytes=64, channel=2, descriptor_id=1, index=0, direction="hbm->l1")
    completion = model.hbm_submit(100, burst.channel, burst)
    assert burst.issue_cycle == 100
    assert burst.service_end == 104
    assert completion == burst.completion == 124
    assert model.channels[2].bytes_served == 64


def test_completions_never_reorder_within_a_channel():
    cfg = HbmConfig(channels=4, peak_bytes_per_cycle=64, avg_latency=20, latency_jitter=10, burst_bytes=64, capacity=64 * MIB)
    model = HbmModel(cfg, seed=3)
    completions = [model.submit(i, 0, 64, i * 64)[1] for i in range(200)]
    assert completions == sorted(completions)


def test_jitter_is_seeded():
    cfg = HbmConfig(channels=4, peak_bytes_per_cycle=64, avg_latency=20, latency_jitter=10, burst_bytes=64, capacity=64 * MIB)
    a = [HbmModel(cfg, seed=5).jitter(k) for k in range(50)]
    b = [HbmModel(cfg, seed=5).jitter(k) for k in range(50)]
    c = [HbmModel(cfg, seed=6).jitter(k) for k in range(50)]
    assert a == b
    assert a != c
    assert all(-10 <= j <= 10 for j in a)


def test_capacity_error():
    model = HbmModel(SMALL_HBM)
    with pytest.raises(HbmCapacityError):
        model.submit(0, 0, 64, SMALL_HBM.capacity - 32)


def test_ideal_memory_is_instant():
    mem = make_main_memory("ideal", SMALL_HBM)
    assert isinstance(mem, IdealMemory)
    assert mem.submit(7, 0, 4096, 0) == (7, 7)
    assert mem.model_name == "ideal"
    with pytest.raises(ValueError):
        make_main_memory("dram", SMALL_HBM)


def test_hbm_config_rejects_bad_geometry():
    with pytest.raises(ValueError):
        HbmConfig(channels=3)
    with pytest.raises(ValueError):
        HbmConfig(latency_jitter=200, avg_latency=100)


def test_sustained_bandwidth_scrambled_stream_small():
    cfg = load_preset("tiny-32")
    result = hbm_stream(cfg, total_bytes=1 * MIB, chunk=16 * KIB)
    assert result.bytes == 1 * MIB
    assert result.efficiency >= 0.95
    assert len(set(result.channel_bytes)) == 1


def test_unscrambled_stream_is_bounded_by_one_channel():
    cfg = load_preset("tiny-32")
    result = hbm_stream(cfg, total_bytes=256 * KIB, scramble=False, chunk=16 * KIB)
    assert result.efficiency <= 1 / cfg.hbm.channels
    assert result.channel_bytes[0] == 256 * KIB


@pytest.mark.slow
def test_desk_stream_reaches_98_percent_of_peak():
    cfg = load_preset("desk-256")
    assert hbm_stream(cfg).efficiency >= 0.98


def test_sustained_bandwidth_empty_trace():
    with pytest.raises(ValueError):
        hbm_sustained_bandwidth([])
    assert channel_loads([], 4) == [0, 0, 0, 0]


def test_sustained_bandwidth_discounts_access_latency():
    record = BurstRecord(
        issue_cycle=0, service_end=16, completion_cycle=146, channel=0, bytes=256, direction="hbm->l1", descriptor=1
    )
    assert hbm_sustained_bandwidth([record], warmup=130) == 16.0
    # never shorter than the service window
    assert hbm_sustained_bandwidth([record], warmup=200) == 16.0
    assert hbm_sustained_bandwidth([record]) == pytest.approx(256 / 146)


def test_l1_store_words_and_blocks():
    cfg = load_preset("tiny-32")
    l1 = L1Store(cfg)
    l1.write_word(8, 0x1_0000_0002)
    assert l1.read_word(8) == 2
    l1.write_block(16, bytes(range(8)))
    assert l1.read_block(16, 8) == bytes(range(8))
    l1.load_words(0, [1, 2, 3])
    assert list(l1.dump_words(0, 3)) == [1, 2, 3]
    assert l1.bank_view(1)[0] == 2
    with pytest.raises(AddressError):
        l1.read_word(2)
    with pytest.raises(AddressError):
        l1.read_word(cfg.l1_bytes)


def test_l1_digest_tracks_content():
    cfg = load_preset("tiny-32")
    a, b = L1Store(cfg), L1Store(cfg)
    assert a.digest() == b.digest()
    b.write_word(0, 1)
    assert a.digest() != b.digest()


def test_main_memory_store_spans_pages(tmp_path):
    store = MainMemoryStore(1 * MIB)
    data = np.arange(40000, dtype=np.uint8).tobytes()
    store.write(65536 - 100, data)
    assert store.read(65536 - 100, len(data)) == data
    assert store.read(512 * KIB, 4) == bytes(4)
    path = tmp_path / "dump.bin"
    store.store_image(65536 - 100, 16, path)
    assert path.read_bytes() == data[:16]
    assert store.load_image(0, path) == 16
    assert "|" in store.hexdump(0, 16)
    with pytest.raises(HbmCapacityError):
        store.read(1 * MIB - 2, 4)
