import random

import pytest

from app.config import AddressError, load_preset
from app.models import DmaDescriptor
from app.sim.dma import (
    BURSTS_DONE,
    BURSTS_TOTAL,
    DIRECTION,
    DST_LO,
    SIZE,
    SRC_LO,
    START,
    STATUS,
    STATUS_BUSY,
    STATUS_BUSY_ERROR,
    STATUS_ERROR,
    DmaEngine,
    DmaFault,
    DmaFrontend,
    split,
    write_burst_trace,
)
from app.sim.memory import HbmCapacityError, L1Store, ScrambleMap, make_main_memory


@pytest.fixture
def cfg():
    return load_preset("tiny-32")


def _engine(cfg, kind="hbm", **kwargs):
    return DmaEngine(cfg, L1Store(cfg), make_main_memory(kind, cfg.hbm), **kwargs)


def _run(engine, start=0, limit=100_000):
    cycle = start
    while engine.busy:
        engine.tick(cycle)
        cycle += 1
        assert cycle < limit, "transfer never finished"
    return cycle


def test_split_respects_burst_and_stripe_boundaries(cfg):
    smap = ScrambleMap.for_hbm(cfg.hbm)
    desc = DmaDescriptor(src=40, dst=8, bytes_per_row=200)
    bursts = split(desc, smap, cfg)
    assert sum(b.bytes for b in bursts) == 200
    for b in bursts:
        assert b.src // cfg.hbm.burst_bytes == (b.src + b.bytes - 1) // cfg.hbm.burst_bytes
        assert b.dst // cfg.tile_stripe_bytes == (b.dst + b.bytes - 1) // cfg.tile_stripe_bytes
    assert bursts[0].bytes == 24
    assert [b.index for b in bursts] == list(range(len(bursts)))


def test_split_random_descriptors_cover_exactly(cfg):
    smap = ScrambleMap.for_hbm(cfg.hbm)
    rng = random.Random(7)
    for _ in range(500):
        rows = rng.randint(1, 4)
        row = 4 * rng.randint(1, 96)
        src_stride = row + 4 * rng.randint(0, 16)
        dst_stride = row + 4 * rng.randint(0, 16)
        desc = DmaDescriptor(
            src=4 * rng.randint(0, 4096),
            dst=4 * rng.randint(0, 4096),
            bytes_per_row=row,
            rows=rows,
            src_stride=src_stride,
            dst_stride=dst_stride,
        )
        covered = []
        for b in split(desc, smap, cfg):
            assert 0 < b.bytes <= cfg.hbm.burst_bytes
            assert b.channel == smap.channel(b.src)
            covered.extend(range(b.src, b.src + b.bytes))
        expected = [desc.src + r * src_stride + i for r in range(rows) for i in range(row)]
        assert covered == expected


def test_split_out_of_range(cfg):
    smap = ScrambleMap.for_hbm(cfg.hbm)
    with pytest.raises(AddressError):
        split(DmaDescriptor(src=0, dst=cfg.l1_bytes - 4, bytes_per_row=8), smap, cfg)
    with pytest.raises(HbmCapacityError):
        split(DmaDescriptor(src=cfg.hbm.capacity - 4, dst=0, bytes_per_row=8), smap, cfg)


def test_descriptor_validation():
    with pytest.raises(ValueError):
        DmaDescriptor(src=2, dst=0, bytes_per_row=8)
    with pytest.raises(ValueError):
        DmaDescriptor(src=0, dst=0, bytes_per_row=16, rows=2, src_stride=8)


def test_round_trip_moves_data(cfg):
    engine = _engine(cfg)
    payload = bytes(range(256)) * 4
    engine.memory.store.write(4096, payload)
    engine.launch(DmaDescriptor(src=4096, dst=512, bytes_per_row=len(payload)), cycle=0)
    end = _run(engine)
    assert engine._l1.read_block(512, len(payload)) == payload
    engine.launch(DmaDescriptor(src=512, dst=65536, bytes_per_row=len(payload), direction="l1->hbm"), cycle=end)
    _run(engine, end)
    assert engine.memory.store.read(65536, len(payload)) == payload
    assert engine.bytes_moved == 2 * len(payload)


def test_two_dimensional_transfer(cfg):
    engine = _engine(cfg, kind="ideal")
    for r in range(3):
        engine.memory.store.write(r * 1024, bytes([r + 1]) * 32)
    engine.launch(DmaDescriptor(src=0, dst=0, bytes_per_row=32, rows=3, src_stride=1024, dst_stride=64), cycle=0)
    _run(engine)
    for r in range(3):
        assert engine._l1.read_block(r * 64, 32) == bytes([r + 1]) * 32


def test_single_burst_timing(cfg):
    engine = _engine(cfg)
    engine.launch(DmaDescriptor(src=0, dst=0, bytes_per_row=64), cycle=0)
    end = _run(engine)
    record = engine.trace[0]
    service = 64 // cfg.hbm.per_channel_bytes_per_cycle
    assert record.service_end == service
    assert record.completion_cycle == service + cfg.hbm.avg_latency
    assert end == record.completion_cycle + 1


def test_outstanding_limit_caps_issue(cfg):
    engine = _engine(cfg, outstanding=2, backends=1)
    engine.launch(DmaDescriptor(src=0, dst=0, bytes_per_row=64 * 8), cycle=0)
    engine.tick(0)
    assert engine.backends[0].outstanding == 2
    assert len(engine.backends[0].queue) == 6


def test_backend_follows_destination_tile(cfg):
    engine = _engine(cfg)
    stripe = cfg.tile_stripe_bytes
    per = cfg.total_tiles // len(engine.backends)
    assert engine.backend_of(0) == 0
    assert engine.backend_of(stripe * per) == 1
    assert engine.backend_of(stripe * cfg.total_tiles) == 0


def test_landing_avoids_banks_granted_to_cores(cfg):
    engine = _engine(cfg, kind="ideal")
    engine.launch(DmaDescriptor(src=0, dst=0, bytes_per_row=16), cycle=0)
    assert engine.tick(0, served_banks={1}) == []
    assert len(engine.tick(1, served_banks=set())) == 1


def test_empty_descriptor_completes_immediately(cfg):
    engine = _engine(cfg)
    did = engine.launch(None, cycle=5)
    status = engine.status(did)
    assert not status.busy
    assert status.completion_cycle == 5
    assert not engine.busy


def test_jitter_does_not_change_data(cfg):
    jittery = cfg.model_copy(update={"hbm": cfg.hbm.model_copy(update={"latency_jitter": 10})})
    images = []
    for seed in (1, 2):
        engine = DmaEngine(jittery, L1Store(jittery), make_main_memory("hbm", jittery.hbm, seed=seed))
        engine.memory.store.write(0, bytes(range(200)) * 10)
        engine.launch(DmaDescriptor(src=0, dst=0, bytes_per_row=2000), cycle=0)
        _run(engine)
        images.append(engine._l1.digest())
    assert images[0] == images[1]


def test_frontend_program_and_status(cfg):
    engine = _engine(cfg)
    front = DmaFrontend(engine)
    assert front.program(DmaDescriptor(src=0, dst=0, bytes_per_row=256))
    assert front.read(STATUS) & STATUS_BUSY
    assert front.read(BURSTS_TOTAL) == 4
    _run(engine)
    assert front.read(BURSTS_DONE) == 4
    assert not front.read(STATUS) & STATUS_BUSY
    assert front.status().completion_cycle is not None


def test_frontend_start_while_busy_sets_busy_error(cfg):
    engine = _engine(cfg)
    front = DmaFrontend(engine)
    desc = DmaDescriptor(src=0, dst=0, bytes_per_row=256)
    assert front.program(desc)
    first = front.current
    assert not front.program(desc)
    assert front.read(STATUS) & STATUS_BUSY_ERROR
    assert front.current == first


def test_frontend_missing_fields_set_error(cfg):
    front = DmaFrontend(_engine(cfg))
    front.write(SRC_LO, 0)
    front.write(START, 1)
    assert front.read(STATUS) & STATUS_ERROR


def test_frontend_bad_direction_and_range(cfg):
    front = DmaFrontend(_engine(cfg))
    for csr, value in ((SRC_LO, 0), (DST_LO, 0), (SIZE, 64), (DIRECTION, 3)):
        front.write(csr, value)
    front.write(START, 1)
    assert front.status().error
    front.write(DIRECTION, 0)
    front.write(DST_LO, cfg.l1_bytes)
    front.write(START, 1)
    assert front.status().error


def test_frontend_zero_size_is_a_no_op(cfg):
    engine = _engine(cfg)
    front = DmaFrontend(engine)
    for csr, value in ((SRC_LO, 0), (DST_LO, 0), (SIZE, 0)):
        front.write(csr, value)
    front.write(START, 1)
    assert not front.busy
    assert not front.status().error


def test_frontend_rejects_undefined_registers(cfg):
    front = DmaFrontend(_engine(cfg))
    with pytest.raises(DmaFault):
        front.write(0x34, 1)
    with pytest.raises(DmaFault):
        front.write(STATUS, 1)
    with pytest.raises(DmaFault):
        front.read(0x40)


def test_burst_trace_csv(cfg, tmp_path):
    engine = _engine(cfg)
    engine.launch(DmaDescriptor(src=0, dst=0, bytes_per_row=128), cycle=0)
    _run(engine)
    path = tmp_path / "bursts.csv"
    write_burst_trace(engine.trace, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "cycle,channel,bytes,direction,descriptor,completion"
    assert len(lines) == 3
