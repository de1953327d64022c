from __future__ import annotations

import ast
import operator
import re
from typing import Callable, Dict, List, Optional

from app.models import ClusterConfig, DmaDescriptor
from app.sim.builder import ProgramBuilder
from app.sim.core import NUM_REGS, Instr, Program

_REG = re.compile(r"^r(\d+)$")
_MEM = re.compile(r"^(.*)\((r\d+)\)$")
_PLACEHOLDER = re.compile(r"\{([^{}]*)\}")
_LABEL = re.compile(r"^([A-Za-z_][\w.]*):$")

_BINOPS: Dict[type, Callable[[int, int], int]] = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.FloorDiv: operator.floordiv,
    ast.Mod: operator.mod,
    ast.LShift: operator.lshift,
    ast.RShift: operator.rshift,
    ast.BitAnd: operator.and_,
    ast.BitOr: operator.or_,
    ast.BitXor: operator.xor,
}
_CMPOPS = {
    ast.Lt: operator.lt,
    ast.LtE: operator.le,
    ast.Gt: operator.gt,
    ast.GtE: operator.ge,
    ast.Eq: operator.eq,
    ast.NotEq: operator.ne,
}


class ProgramSyntaxError(ValueError):
    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


def evaluate_expr(expr: str, params: Dict[str, int]) -> int:
    """Integer arithmetic over ``params``. Anything beyond arithmetic, shifts and comparisons is rejected."""
    tree = ast.parse(expr.strip(), mode="eval")

    def walk(node: ast.AST) -> int:
        if isinstance(node, ast.Expression):
            return walk(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, int):
            return node.value
        if isinstance(node, ast.Name):
            if node.id not in params:
                raise ValueError(f"unknown parameter {node.id!r}")
            return params[node.id]
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
            return -walk(node.operand)
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](walk(node.left), walk(node.right))
        if isinstance(node, ast.Compare) and len(node.ops) == 1 and type(node.ops[0]) in _CMPOPS:
            return int(_CMPOPS[type(node.ops[0])](walk(node.left), walk(node.comparators[0])))
        raise ValueError(f"unsupported expression {ast.dump(node)}")

    return walk(tree)


def core_params(cfg: ClusterConfig, core_id: int, extra: Optional[Dict[str, int]] = None) -> Dict[str, int]:
    tile = cfg.tile_of_core(core_id)
    params = {
        "core": core_id,
        "local": core_id % cfg.cores_per_tile,
        "tile": tile,
        "subgroup": cfg.subgroup_of_tile(tile),
        "group": cfg.group_of_tile(tile),
        "ncores": cfg.total_cores,
        "ntiles": cfg.total_tiles,
        "nbanks": cfg.total_banks,
        "banks_per_tile": cfg.banks_per_tile,
        "bank_words": cfg.bank_words,
    }
    params.update(extra or {})
    return params


class ProgramParser:
    """
    Parser for the per-core program text format.

    One instruction per line, ``name:`` labels, ``#`` comments and ``{expr}``
    placeholders substituted per core (``core``, ``tile``, ``local``, ``group`` ...).
    A ``.active <expr>`` line limits the program to the cores where expr is non-zero.
    """

    def __init__(self, cfg: ClusterConfig, params: Optional[Dict[str, int]] = None) -> None:
        self._cfg = cfg
        self._params = params or {}

    def parse_all(self, text: str) -> List[Program]:
        pool: Dict[Instr, Instr] = {}
        return [self.parse(text, c, pool) for c in range(self._cfg.total_cores)]

    def parse(self, text: str, core_id: int = 0, pool: Optional[Dict[Instr, Instr]] = None) -> Program:
        params = core_params(self._cfg, core_id, self._params)
        builder = ProgramBuilder(f"core{core_id}", pool)
        lines = text.split("\n")
        for number, raw in enumerate(lines, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                line = _PLACEHOLDER.sub(lambda m: str(evaluate_expr(m.group(1), params)), line)
            except (ValueError, SyntaxError, ZeroDivisionError) as e:
                raise ProgramSyntaxError(number, f"bad placeholder: {e}") from e
            if line.startswith(".active"):
                if not self._int(line[len(".active"):], number, params):
                    return Program(name=builder.name)
                continue
            label = _LABEL.match(line)
            if label:
                try:
                    builder.label(label.group(1))
                except ValueError as e:
                    raise ProgramSyntaxError(number, str(e)) from e
                continue
            self._parse_instruction(builder, line, number, params)
        try:
            return builder.build()
        except ValueError as e:
            raise ProgramSyntaxError(len(lines), str(e)) from e

    def _int(self, token: str, line: int, params: Dict[str, int]) -> int:
        try:
            return evaluate_expr(token, params)
        except (ValueError, SyntaxError, ZeroDivisionError) as e:
            raise ProgramSyntaxError(line, f"bad integer {token.strip()!r}") from e

    def _reg(self, token: str, line: int) -> int:
        m = _REG.match(token.strip())
        if not m or int(m.group(1)) >= NUM_REGS:
            raise ProgramSyntaxError(line, f"bad register {token.strip()!r}")
        return int(m.group(1))

    def _mem(self, token: str, line: int, params: Dict[str, int]) -> tuple[int, int]:
        m = _MEM.match(token.strip())
        if not m:
            raise ProgramSyntaxError(line, f"bad memory operand {token.strip()!r}, expected offset(rN)")
        offset = self._int(m.group(1) or "0", line, params)
        return offset, self._reg(m.group(2), line)

    def _parse_instruction(self, b: ProgramBuilder, line: str, number: int, params: Dict[str, int]) -> None:
        mnemonic, _, rest = line.partition(" ")
        args = [a.strip() for a in rest.split(",")] if rest.strip() else []

        def need(n: int) -> None:
            if len(args) != n:
                raise ProgramSyntaxError(number, f"{mnemonic} takes {n} operands, got {len(args)}")

        if mnemonic == "lw":
            need(2)
            offset, base = self._mem(args[1], number, params)
            b.load(self._reg(args[0], number), offset, base)
        elif mnemonic == "sw":
            need(2)
            offset, base = self._mem(args[1], number, params)
            b.store(self._reg(args[0], number), offset, base)
        elif mnemonic == "amoadd":
            need(3)
            offset, base = self._mem(args[1], number, params)
            b.amo_add(self._reg(args[0], number), offset, self._reg(args[2], number), base)
        elif mnemonic == "li":
            need(2)
            b.li(self._reg(args[0], number), self._int(args[1], number, params))
        elif mnemonic == "op":
            if len(args) < 2:
                raise ProgramSyntaxError(number, "op takes rd, name[, sources...][, imm=N]")
            imm = 0
            if args[-1].startswith("imm="):
                imm = self._int(args.pop()[4:], number, params)
            srcs = [self._reg(a, number) for a in args[2:]]
            try:
                b.op(self._reg(args[0], number), args[1], *srcs, imm=imm)
            except KeyError as e:
                raise ProgramSyntaxError(number, f"unknown operation {args[1]!r}") from e
        elif mnemonic in ("beqz", "bnez"):
            need(2)
            b.branch(mnemonic, self._reg(args[0], number), args[1])
        elif mnemonic == "j":
            need(1)
            b.branch("j", 0, args[0])
        elif mnemonic == "barrier":
            need(1)
            b.barrier(self._int(args[0], number, params))
        elif mnemonic == "dma.start":
            b.dma_start(self._descriptor(rest, number, params))
        elif mnemonic == "dma.wait":
            need(0)
            b.dma_wait()
        elif mnemonic == "mark":
            need(1)
            b.mark(args[0])
        elif mnemonic == "halt":
            need(0)
            b.halt()
        else:
            raise ProgramSyntaxError(number, f"unknown mnemonic {mnemonic!r}")

    def _descriptor(self, rest: str, number: int, params: Dict[str, int]) -> DmaDescriptor:
        fields: Dict[str, object] = {}
        keys = {"src": "src", "dst": "dst", "size": "bytes_per_row", "rows": "rows",
                "src_stride": "src_stride", "dst_stride": "dst_stride"}
        for item in rest.split():
            key, sep, value = item.partition("=")
            if not sep:
                raise ProgramSyntaxError(number, f"expected key=value, got {item!r}")
            if key == "dir":
                fields["direction"] = value
            elif key in keys:
                fields[keys[key]] = self._int(value, number, params)
            else:
                raise ProgramSyntaxError(number, f"unknown DMA field {key!r}")
        try:
            return DmaDescriptor(**fields)
        except ValueError as e:
            raise ProgramSyntaxError(number, f"bad DMA descriptor: {e}") from e
