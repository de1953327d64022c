import pytest

from app.config import load_preset
from app.program_parser import ProgramParser, ProgramSyntaxError, core_params, evaluate_expr
from app.sim.cluster import Cluster
from app.sim.core import Barrier, Branch, DmaStart, Load, Mark

COUNTER = """
# every core bumps a shared counter, then core 0 reads it back
.active {core < 8}
mark count
li r1, 1
amoadd r2, 256(r0), r1
barrier 0
"""


@pytest.fixture
def parser():
    return ProgramParser(load_preset("tiny-32"))


def test_placeholders_are_per_core(parser):
    prog = parser.parse("lw r1, {core * 4}(r0)\nhalt", core_id=5)
    assert prog.instrs[0] == Load(1, 20, 0)


def test_labels_and_branches(parser):
    prog = parser.parse("li r1, 3\ntop:\nop r1, addi, r1, imm=-1\nbnez r1, top\nj done\ndone:\nhalt")
    assert prog.instrs[2] == Branch("bnez", 1, 1)
    assert prog.instrs[3] == Branch("j", 0, 4)


def test_active_filter_gives_empty_programs(parser):
    programs = parser.parse_all(COUNTER)
    assert all(len(p) > 0 for p in programs[:8])
    assert all(len(p) == 0 for p in programs[8:])
    assert type(programs[0].instrs[0]) is Mark
    assert Barrier(0) in programs[0].instrs


def test_parsed_programs_run(parser):
    cfg = load_preset("tiny-32")
    result = Cluster(cfg).run(parser.parse_all(COUNTER))
    assert result.l1.read_word(256) == 8
    assert "count" in result.cores[0].buckets


def test_dma_line(parser):
    prog = parser.parse("dma.start src=0 dst={tile * 64} size=128 rows=2 src_stride=256 dst_stride=128\ndma.wait", core_id=8)
    assert type(prog.instrs[0]) is DmaStart
    desc = prog.descriptors[0]
    assert desc.dst == 2 * 64
    assert (desc.bytes_per_row, desc.rows, desc.row_src_stride) == (128, 2, 256)


def test_dma_direction(parser):
    prog = parser.parse("dma.start src=0 dst=4096 size=64 dir=l1->hbm")
    assert prog.descriptors[0].direction == "l1->hbm"


@pytest.mark.parametrize(
    "text, message",
    [
        ("frob r1", "unknown mnemonic"),
        ("lw r1, 4", "bad memory operand"),
        ("lw r99, 0(r0)", "bad register"),
        ("li r1", "takes 2 operands"),
        ("op r1, nosuch, r2", "unknown operation"),
        ("j nowhere", "undefined label"),
        ("a:\na:", "defined twice"),
        ("lw r1, {missing}(r0)", "bad placeholder"),
        ("dma.start src=0 dst=2 size=4", "bad DMA descriptor"),
        ("dma.start src=0 colour=3", "unknown DMA field"),
    ],
)
def test_syntax_errors(parser, text, message):
    with pytest.raises(ProgramSyntaxError, match=message):
        parser.parse(text)


def test_error_carries_line_number(parser):
    with pytest.raises(ProgramSyntaxError) as info:
        parser.parse("li r1, 1\n\nfrob")
    assert info.value.line == 3


def test_expression_evaluator_is_restricted():
    assert evaluate_expr("(3 + 4) * 2 >> 1", {}) == 7
    assert evaluate_expr("tile % 2 == 1", {"tile": 3}) == 1
    with pytest.raises(ValueError):
        evaluate_expr("__import__('os')", {})
    with pytest.raises(ValueError):
        evaluate_expr("x", {})


def test_core_params():
    cfg = load_preset("tiny-32")
    params = core_params(cfg, 13, {"n": 2})
    assert params["tile"] == 3
    assert params["local"] == 1
    assert params["subgroup"] == 1
    assert params["group"] == 0
    assert params["n"] == 2
