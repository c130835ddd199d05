"""Bundled fuzz targets and their seed / witness corpora.

Each target ships a clean and a vulnerable variant. Seeds live under
``<name>/seeds/`` and witnesses under ``<name>/witnesses/<oracle-id>.bin``
next to this file.
"""

from __future__ import annotations

from pathlib import Path

from ..steering import TargetHarness, review_harness
from . import archive, face, linreg

DATA_DIR = Path(__file__).parent

REGISTRY: dict[str, type[TargetHarness]] = {}


def register(cls: type[TargetHarness]) -> type[TargetHarness]:
    review_harness(cls)
    REGISTRY[cls.name] = cls
    return cls


for _cls in (face.FaceHarness, archive.ArchiveHarness, linreg.RegressionHarness):
    register(_cls)


def names() -> list[str]:
    return sorted(REGISTRY)


def get_harness(name: str, variant: str = "clean", **params) -> TargetHarness:
    try:
        cls = REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown target {name!r}; known: {', '.join(names())}") from None
    return cls(variant, **params)


# Generators for the checked-in corpora; tests compare files against these.
SEED_BUILDERS = {
    "t1": {"face.bin": face.seed_image},
    "t2": {"reports.bin": archive.seed_archive},
    "t3": {"benign.bin": linreg.seed_records},
}
WITNESS_BUILDERS = {
    "t1": {"t1-evasion.bin": face.evasion_witness},
    "t2": {"t2-row-bounds.bin": archive.row_bounds_witness,
           "t2-misclustering.bin": archive.misclustering_witness},
    "t3": {"t3-nan-cost.bin": linreg.nan_witness, "t3-divergence.bin": linreg.divergence_witness,
           "t3-nontermination.bin": linreg.nontermination_witness},
}


def seeds_dir(name: str) -> Path:
    return DATA_DIR / name / "seeds"


def witnesses_dir(name: str) -> Path:
    return DATA_DIR / name / "witnesses"


def load_seeds(name: str) -> list[bytes]:
    return [p.read_bytes() for p in sorted(seeds_dir(name).glob("*.bin"))]


def load_witnesses(name: str) -> dict[str, bytes]:
    """Witness inputs keyed by the oracle id they must trip."""
    return {p.stem: p.read_bytes() for p in sorted(witnesses_dir(name).glob("*.bin"))}


def write_corpora(root: Path = DATA_DIR) -> None:
    for builders, sub in ((SEED_BUILDERS, "seeds"), (WITNESS_BUILDERS, "witnesses")):
        for name, files in builders.items():
            d = root / name / sub
            d.mkdir(parents=True, exist_ok=True)
            for fname, build in files.items():
                (d / fname).write_bytes(build())
