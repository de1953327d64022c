from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from app.models import BankLocation, ClusterConfig, HbmConfig, WorkloadConfig
from app.utils import GIB, MIB

load_dotenv()

logger = logging.getLogger(__name__)

PRESET_DIR_ENV = "CLUSTERSIM_PRESET_DIR"
DEFAULT_PRESET = "terapool-1-3-5-9"


class ConfigError(ValueError):
    """Malformed or invalid configuration document."""


class AddressError(ValueError):
    """Unaligned or out-of-range L1 address."""


HBM_PRESETS: Dict[str, Dict[str, Any]] = {
    "hbm2e-910": {
        "channels": 16,
        "peak_bytes_per_cycle": 1024,
        "avg_latency": 130,
        "latency_jitter": 20,
        "burst_bytes": 256,
        "capacity": 32 * GIB,
        "nominal_gbps": 910.0,
    },
    "hbm2e-920": {
        "channels": 16,
        "peak_bytes_per_cycle": 1024,
        "avg_latency": 130,
        "latency_jitter": 20,
        "burst_bytes": 256,
        "capacity": 32 * GIB,
        "nominal_gbps": 920.0,
    },
}

_TERAPOOL: Dict[str, Any] = {
    "cores_per_tile": 8,
    "tiles_per_subgroup": 8,
    "subgroups_per_group": 4,
    "groups": 4,
    "banks_per_tile": 32,
    "bank_words": 256,
    "latency_tile": 1,
    "latency_subgroup": 3,
    "latency_group": 5,
    "hbm": "hbm2e-910",
}

# nominal clock per remote-latency variant, used for wall-time columns only
VARIANT_FREQUENCY_HZ = {7: 730e6, 9: 910e9 / 1024, 11: 924e6}

PRESETS: Dict[str, Dict[str, Any]] = {
    **{
        f"terapool-1-3-5-{x}": {
            **_TERAPOOL,
            "name": f"terapool-1-3-5-{x}",
            "latency_remote": x,
            "frequency_hz": VARIANT_FREQUENCY_HZ[x],
        }
        for x in (7, 9, 11)
    },
    "desk-256": {
        **_TERAPOOL,
        "name": "desk-256",
        "tiles_per_subgroup": 2,
        "latency_remote": 9,
        "hbm": {**HBM_PRESETS["hbm2e-910"], "peak_bytes_per_cycle": 256, "capacity": 1 * GIB},
    },
    "tiny-32": {
        "name": "tiny-32",
        "cores_per_tile": 4,
        "tiles_per_subgroup": 2,
        "subgroups_per_group": 2,
        "groups": 2,
        "banks_per_tile": 16,
        "bank_words": 256,
        "latency_tile": 1,
        "latency_subgroup": 3,
        "latency_group": 5,
        "latency_remote": 9,
        "hbm": {
            "channels": 4,
            "peak_bytes_per_cycle": 64,
            "avg_latency": 20,
            "latency_jitter": 0,
            "burst_bytes": 64,
            "capacity": 64 * MIB,
        },
    },
}

WORKLOAD_PRESETS: Dict[str, Dict[str, Any]] = {
    "full": {
        "n_antennas": 64,
        "n_subcarriers": 3276,
        "n_beams": 32,
        "n_tx": 4,
        "fft_size": 4096,
        "n_symbols": 14,
    },
    "desk": {
        "n_antennas": 16,
        "n_subcarriers": 408,
        "n_beams": 8,
        "n_tx": 2,
        "fft_size": 1024,
        "n_symbols": 4,
    },
    "tiny": {
        "n_antennas": 4,
        "n_subcarriers": 48,
        "n_beams": 4,
        "n_tx": 2,
        "fft_size": 64,
        "n_symbols": 2,
    },
}


def _preset_dir() -> Optional[Path]:
    value = os.getenv(PRESET_DIR_ENV)
    return Path(value) if value else None


def list_presets() -> List[str]:
    names = list(PRESETS)
    directory = _preset_dir()
    if directory and directory.is_dir():
        names.extend(p.stem for p in sorted(directory.glob("*.json")) if p.stem not in PRESETS)
    return names


def _preset_document(name: str) -> Dict[str, Any]:
    if name in PRESETS:
        return dict(PRESETS[name])
    directory = _preset_dir()
    if directory is not None:
        path = directory / f"{name}.json"
        if path.is_file():
            logger.debug("loading preset %s from %s", name, path)
            return _decode(path.read_text(encoding="utf-8"))
    raise ConfigError(f"unknown preset {name!r} (known: {', '.join(list_presets())})")


def _decode(text: str) -> Dict[str, Any]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"parse error at line {e.lineno}, column {e.colno}: {e.msg}") from e
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    return doc


def _resolve(doc: Dict[str, Any], depth: int = 0) -> Dict[str, Any]:
    if depth > 8:
        raise ConfigError("preset chain too deep")
    doc = dict(doc)
    base_name = doc.pop("preset", None)
    if base_name is not None:
        base = _resolve(_preset_document(base_name), depth + 1)
        base_hbm = base.get("hbm")
        base.update(doc)
        if isinstance(doc.get("hbm"), dict) and isinstance(base_hbm, dict):
            base["hbm"] = {**base_hbm, **doc["hbm"]}
        doc = base
    hbm = doc.get("hbm")
    if isinstance(hbm, str):
        if hbm not in HBM_PRESETS:
            raise ConfigError(f"unknown hbm preset {hbm!r}")
        doc["hbm"] = dict(HBM_PRESETS[hbm])
    elif isinstance(hbm, dict) and "preset" in hbm:
        hbm = dict(hbm)
        name = hbm.pop("preset")
        if name not in HBM_PRESETS:
            raise ConfigError(f"unknown hbm preset {name!r}")
        doc["hbm"] = {**HBM_PRESETS[name], **hbm}
    return doc


def _validation_message(err: ValidationError) -> str:
    parts = []
    for item in err.errors():
        loc = ".".join(str(x) for x in item.get("loc", ()))
        msg = item.get("msg", "")
        if msg.startswith("Value error, "):
            msg = msg[len("Value error, "):]
        if item.get("type") == "extra_forbidden":
            msg = "unknown key"
        parts.append(f"{loc}: {msg}" if loc else msg)
    return "; ".join(parts)


def build_config(doc: Dict[str, Any]) -> ClusterConfig:
    try:
        return ClusterConfig.model_validate(_resolve(doc))
    except ValidationError as e:
        raise ConfigError(_validation_message(e)) from e


def parse_config(text: str) -> ClusterConfig:
    """Parse a JSON config document into a validated ClusterConfig.

    The document may name a base ``preset`` and override any key; ``hbm`` may be an
    object or the name of an HBM preset. Unknown keys are rejected.
    """
    return build_config(_decode(text))


def load_config(path: str | Path) -> ClusterConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror or e}") from e
    return parse_config(text)


def load_preset(name: str = DEFAULT_PRESET) -> ClusterConfig:
    return build_config({"preset": name})


def hbm_preset(name: str) -> HbmConfig:
    if name not in HBM_PRESETS:
        raise ConfigError(f"unknown hbm preset {name!r}")
    return HbmConfig(**HBM_PRESETS[name])


def default_workload(cfg: ClusterConfig, **overrides: Any) -> WorkloadConfig:
    if cfg.total_cores >= 1024:
        family = "full"
    elif cfg.total_cores >= 256:
        family = "desk"
    else:
        family = "tiny"
    return workload_preset(family, **overrides)


def workload_preset(family: str, **overrides: Any) -> WorkloadConfig:
    if family not in WORKLOAD_PRESETS:
        raise ConfigError(f"unknown workload preset {family!r}")
    try:
        return WorkloadConfig(**{**WORKLOAD_PRESETS[family], **overrides})
    except ValidationError as e:
        raise ConfigError(_validation_message(e)) from e


def locate(cfg: ClusterConfig, addr: int) -> BankLocation:
    """Word-interleaved L1 map: consecutive words go to consecutive banks cluster-wide."""
    if addr % 4:
        raise AddressError(f"address 0x{addr:x} is not word aligned")
    if not 0 <= addr < cfg.l1_bytes:
        raise AddressError(f"address 0x{addr:x} outside L1 ({cfg.l1_bytes} bytes)")
    word = addr >> 2
    bank = word % cfg.total_banks
    return BankLocation(
        tile_index=bank // cfg.banks_per_tile,
        bank_in_tile=bank % cfg.banks_per_tile,
        word_offset=word // cfg.total_banks,
    )


def address_of(cfg: ClusterConfig, loc: BankLocation) -> int:
    bank = loc.tile_index * cfg.banks_per_tile + loc.bank_in_tile
    return (loc.word_offset * cfg.total_banks + bank) * 4


def access_latency(cfg: ClusterConfig, core_id: int, addr: int) -> int:
    if not 0 <= core_id < cfg.total_cores:
        raise ValueError(f"core {core_id} outside cluster of {cfg.total_cores}")
    loc = locate(cfg, addr)
    return cfg.latency_between(cfg.tile_of_core(core_id), loc.tile_index)


def latency_table(cfg: ClusterConfig) -> List[List[int]]:
    """latency_table(cfg)[core_tile][bank_tile] -> round-trip cycles."""
    tiles = cfg.total_tiles
    return [[cfg.latency_between(a, b) for b in range(tiles)] for a in range(tiles)]
