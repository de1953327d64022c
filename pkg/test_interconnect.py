import io

from app.config import load_preset
from app.sim.bench import latency_scan, word_address
from app.sim.interconnect import AMO_ADD, READ, WRITE, Interconnect, MemRequest
from app.sim.memory import L1Store


def _drain(ic, start):
    """Tick until idle; returns {req_id: response}."""
    out = {}
    cycle = start
    while not ic.idle():
        for rsp in ic.tick(cycle):
            out[rsp.req_id] = rsp
        cycle += 1
    return out


def test_uncontended_round_trip_per_class():
    cfg = load_preset("terapool-1-3-5-9")
    ic = Interconnect(cfg, L1Store(cfg))
    tile = cfg.banks_per_tile
    targets = {
        0: word_address(cfg, 0, 0),
        1: word_address(cfg, tile * 1, 0),
        2: word_address(cfg, tile * cfg.tiles_per_subgroup, 0),
        3: word_address(cfg, tile * cfg.tiles_per_group, 0),
    }
    for req_id, addr in targets.items():
        ic.submit(10 + 10 * req_id, MemRequest(req_id, 0, READ, addr))
        rsp = _drain(ic, 10 + 10 * req_id)[req_id]
        assert rsp.deliver_cycle - (10 + 10 * req_id) == [1, 3, 5, 9][req_id]


def test_latency_scan_exact_on_tiny_cluster():
    cfg = load_preset("tiny-32")
    observed = latency_scan(cfg)
    assert observed == {"tile": {1}, "subgroup": {3}, "group": {5}, "remote": {9}}


def test_latency_scan_tracks_variant():
    cfg = load_preset("tiny-32").with_variant(11)
    assert latency_scan(cfg)["remote"] == {11}


def test_bank_conflict_serializes_round_robin():
    cfg = load_preset("tiny-32")
    ic = Interconnect(cfg, L1Store(cfg))
    for core in range(4):
        ic.submit(0, MemRequest(core, core, READ, 0))
    responses = _drain(ic, 0)
    delivered = sorted(responses.values(), key=lambda r: r.deliver_cycle)
    assert [r.core_id for r in delivered] == [0, 1, 2, 3]
    assert [r.deliver_cycle for r in delivered] == [1, 2, 3, 4]


def test_round_robin_pointer_moves_past_winner():
    cfg = load_preset("tiny-32")
    ic = Interconnect(cfg, L1Store(cfg))
    ic.submit(0, MemRequest(0, 2, READ, 0))
    _drain(ic, 0)
    # pointer now sits at core 3, so core 3 beats core 1
    ic.submit(10, MemRequest(1, 1, READ, 0))
    ic.submit(10, MemRequest(2, 3, READ, 0))
    responses = _drain(ic, 10)
    assert responses[2].deliver_cycle < responses[1].deliver_cycle


def test_distinct_banks_do_not_conflict():
    cfg = load_preset("tiny-32")
    ic = Interconnect(cfg, L1Store(cfg))
    for core in range(cfg.cores_per_tile):
        ic.submit(0, MemRequest(core, core, READ, word_address(cfg, core, 0)))
    responses = _drain(ic, 0)
    assert {r.deliver_cycle for r in responses.values()} == {1}


def test_per_core_order_to_one_bank():
    cfg = load_preset("tiny-32")
    l1 = L1Store(cfg)
    ic = Interconnect(cfg, l1)
    ic.submit(0, MemRequest(0, 0, WRITE, 0, wdata=7))
    ic.submit(1, MemRequest(1, 0, READ, 0))
    responses = _drain(ic, 0)
    assert responses[1].rdata == 7
    assert responses[0].deliver_cycle < responses[1].deliver_cycle


def test_amo_add_returns_old_value_and_serializes():
    cfg = load_preset("tiny-32")
    l1 = L1Store(cfg)
    l1.write_word(64, 5)
    ic = Interconnect(cfg, l1)
    for core in range(3):
        ic.submit(0, MemRequest(core, core * cfg.cores_per_tile, AMO_ADD, 64, wdata=1))
    responses = _drain(ic, 0)
    assert sorted(r.rdata for r in responses.values()) == [5, 6, 7]
    assert l1.read_word(64) == 8


def test_trace_lines_for_request_and_response():
    cfg = load_preset("tiny-32")
    trace = io.StringIO()
    ic = Interconnect(cfg, L1Store(cfg), trace=trace)
    ic.submit(0, MemRequest(9, 0, READ, 0))
    _drain(ic, 0)
    lines = trace.getvalue().splitlines()
    assert lines[0].startswith("0 REQ core=0 id=9 op=read")
    assert lines[1].startswith("1 RSP id=9 core=0")
