"""Dataset records, JSON-lines ingestion, and deterministic splits.

The canonical on-disk format is JSON lines, one record per line:

    {"id": "...", "lattice": [[...3x3...]], "frac_coords": [[...n x 3...]],
     "atomic_numbers": [...], "targets": {"formation_energy": -1.2, ...}}

Missing targets simply leave the corresponding mask bit cleared downstream.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ParseError, ValidationError
from .lattice import CrystalStructure, validate_structure

logger = logging.getLogger(__name__)

REQUIRED_FIELDS = ("lattice", "frac_coords", "atomic_numbers")


@dataclass
class DatasetRecord:
    id: str
    lattice: np.ndarray
    frac_coords: np.ndarray
    atomic_numbers: List[int]
    targets: Dict[str, float] = field(default_factory=dict)

    def to_structure(self, tasks: Optional[Sequence[str]] = None) -> CrystalStructure:
        labels = {t: self.targets.get(t) for t in tasks} if tasks else dict(self.targets)
        return CrystalStructure(
            atomic_numbers=list(self.atomic_numbers),
            frac_coords=np.asarray(self.frac_coords, dtype=np.float64),
            lattice=np.asarray(self.lattice, dtype=np.float64),
            labels=labels,
            id=self.id,
        )

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "lattice": np.asarray(self.lattice).tolist(),
            "frac_coords": np.asarray(self.frac_coords).tolist(),
            "atomic_numbers": [int(z) for z in self.atomic_numbers],
            "targets": {k: float(v) for k, v in self.targets.items()},
        }


def _parse_record(raw: dict, line_number: int) -> DatasetRecord:
    for key in REQUIRED_FIELDS:
        if key not in raw:
            raise ParseError(line_number, f"missing field {key!r}")
    targets = raw.get("targets", {})
    if not isinstance(targets, dict):
        raise ParseError(line_number, "targets must be an object")
    return DatasetRecord(
        id=str(raw.get("id", f"line-{line_number}")),
        lattice=np.asarray(raw["lattice"], dtype=np.float64),
        frac_coords=np.asarray(raw["frac_coords"], dtype=np.float64),
        atomic_numbers=[int(z) for z in raw["atomic_numbers"]],
        targets={str(k): float(v) for k, v in targets.items() if v is not None},
    )


def scan_dataset(path) -> List[Tuple[int, str, List[str]]]:
    """All problems found in a file as (line, record id, violations)."""
    problems = []
    with open(path) as fh:
        for line_number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = _parse_record(json.loads(line), line_number)
            except (json.JSONDecodeError, ParseError, TypeError, ValueError) as exc:
                problems.append((line_number, "?", [f"ParseError: {exc}"]))
                continue
            violations = validate_structure(record.to_structure())
            if violations:
                problems.append((line_number, record.id, violations))
    return problems


def load_dataset(path, strict: bool = False) -> List[DatasetRecord]:
    """Parse and validate a JSON-lines dataset.

    Invalid lines are skipped with a logged warning, or raised when
    ``strict`` is set.
    """
    records = []
    with open(path) as fh:
        for line_number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = _parse_record(json.loads(line), line_number)
            except json.JSONDecodeError as exc:
                if strict:
                    raise ParseError(line_number, str(exc)) from exc
                logger.warning("skipping line %d: %s", line_number, exc)
                continue
            except (ParseError, TypeError, ValueError) as exc:
                if strict:
                    raise
                logger.warning("skipping line %d: %s", line_number, exc)
                continue
            violations = validate_structure(record.to_structure())
            if violations:
                if strict:
                    raise ValidationError(record.id, violations)
                logger.warning(
                    "skipping record %r (line %d): %s",
                    record.id, line_number, "; ".join(violations),
                )
                continue
            records.append(record)
    return records


def save_dataset(records: Sequence[DatasetRecord], path) -> None:
    with open(path, "w") as fh:
        for record in records:
            fh.write(json.dumps(record.to_json_dict()) + "\n")


@dataclass
class SplitSpec:
    """Counts (ints) or fractions (floats summing to <= 1) per split."""

    train: float
    val: float
    test: float
    seed: int = 0

    def counts(self, total: int) -> Tuple[int, int, int]:
        values = (self.train, self.val, self.test)
        if all(0 <= v <= 1.0 for v in values):  # ratios
            if sum(values) > 1.0 + 1e-9:
                raise ConfigError(f"split ratios {values} sum past 1")
            counts = tuple(int(round(v * total)) for v in values)
        else:  # absolute counts
            if any(v != int(v) or v < 0 for v in values):
                raise ConfigError(f"split counts {values} must be non-negative integers")
            counts = tuple(int(v) for v in values)
        if sum(counts) > total:
            raise ConfigError(f"split sizes {counts} exceed dataset size {total}")
        return counts


def split_dataset(
    records: Sequence[DatasetRecord], spec: SplitSpec
) -> Tuple[List[DatasetRecord], List[DatasetRecord], List[DatasetRecord]]:
    """Seeded shuffle, then partition into train/val/test."""
    n_train, n_val, n_test = spec.counts(len(records))
    order = np.random.default_rng(spec.seed).permutation(len(records))
    shuffled = [records[i] for i in order]
    train = shuffled[:n_train]
    val = shuffled[n_train:n_train + n_val]
    test = shuffled[n_train + n_val:n_train + n_val + n_test]
    return train, val, test
