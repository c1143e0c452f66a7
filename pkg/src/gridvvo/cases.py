"""Locating benchmark case files.

PGLib-OPF files are looked up in the directory named by ``GRIDVVO_PGLIB_DIR``.
When that is unset or the file is missing, the MATPOWER originals shipped in
the ``matpower`` Python distribution are used instead; they share topology
with the PGLib versions but not their limits or costs.
"""

from __future__ import annotations

import importlib.util
import os
from dataclasses import dataclass
from pathlib import Path

PGLIB_ENV = "GRIDVVO_PGLIB_DIR"
DATA_DIR = Path(__file__).parent / "data"

# benchmark name -> MATPOWER stand-in
MATPOWER_EQUIVALENT = {
    "118_ieee": "case118",
    "1354_pegase": "case1354pegase",
    "1888_rte": "case1888rte",
    "2848_rte": "case2848rte",
    "2869_pegase": "case2869pegase",
}


@dataclass(frozen=True)
class CaseLocation:
    path: Path
    source: str  # "pglib", "matpower" or "bundled"


def bundled_case(name: str = "case4_vvo") -> Path:
    path = DATA_DIR / (name if name.endswith(".m") else f"{name}.m")
    if not path.is_file():
        raise FileNotFoundError(path)
    return path


def matpower_data_dir() -> Path | None:
    spec = importlib.util.find_spec("matpower")
    if spec is None or spec.origin is None:
        return None
    path = Path(spec.origin).parent / "data"
    return path if path.is_dir() else None


def locate_case(name: str) -> CaseLocation | None:
    """Find a benchmark case by its PGLib short name (e.g. ``118_ieee``)."""
    pglib = os.environ.get(PGLIB_ENV)
    if pglib:
        path = Path(pglib) / f"pglib_opf_case{name}.m"
        if path.is_file():
            return CaseLocation(path, "pglib")
    mp = matpower_data_dir()
    stand_in = MATPOWER_EQUIVALENT.get(name)
    if mp is not None and stand_in is not None and (mp / f"{stand_in}.m").is_file():
        return CaseLocation(mp / f"{stand_in}.m", "matpower")
    return None
