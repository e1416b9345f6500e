"""Run traces and deterministic CSV/JSON emission.

All floats are written with shortest round-trip decimal formatting (Python
repr), so reruns with identical configuration produce byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from parobs.errors import RejectedInputError

TRACE_COLUMNS = ("t", "p", "s", "lambda", "support_measure", "mass")
TRACE_VERSION = "parobs-trace-v1"
ENVELOPE_COLUMNS = ("t", "ell", "L", "ref_sqrt6tlog")
ENVELOPE_VERSION = "parobs-envelope-v1"
OSCILLATION_COLUMNS = (
    "n", "t_n", "measure_tn", "t_tilde_n", "measure_ttilde_n",
    "threshold_hi", "threshold_lo",
)
OSCILLATION_VERSION = "parobs-oscillation-v1"


def fmt(x: float) -> str:
    return repr(float(x))


@dataclass
class RunTrace:
    """Per-step free-boundary record.

    Columns: t, p (infimum of support, nan when empty), s (stimulus level set,
    nan when not applicable), lambda (multiplier, nan for plain sinks),
    support_measure, mass.
    """

    t: list = field(default_factory=list)
    p: list = field(default_factory=list)
    s: list = field(default_factory=list)
    lam: list = field(default_factory=list)
    support_measure: list = field(default_factory=list)
    mass: list = field(default_factory=list)

    def append(self, t, p, s, lam, support_measure, mass) -> None:
        self.t.append(float(t))
        self.p.append(float(p) if p is not None else np.nan)
        self.s.append(float(s) if s is not None else np.nan)
        self.lam.append(float(lam) if lam is not None else np.nan)
        self.support_measure.append(float(support_measure))
        self.mass.append(float(mass))

    def __len__(self) -> int:
        return len(self.t)

    def column(self, name: str) -> np.ndarray:
        key = {"lambda": "lam"}.get(name, name)
        return np.asarray(getattr(self, key), dtype=float)

    def to_csv(self, path) -> None:
        rows = zip(self.t, self.p, self.s, self.lam, self.support_measure, self.mass)
        lines = [f"# {TRACE_VERSION}", ",".join(TRACE_COLUMNS)]
        lines.extend(",".join(fmt(v) for v in row) for row in rows)
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "RunTrace":
        tr = cls()
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if line == ",".join(TRACE_COLUMNS):
                    continue
                vals = [float(v) for v in line.split(",")]
                if len(vals) != len(TRACE_COLUMNS):
                    raise RejectedInputError(f"malformed trace row in {path}: {line!r}")
                tr.append(*vals)
        return tr


def write_table(path, columns: tuple[str, ...], rows: Iterable[Iterable[float]],
                version: str) -> None:
    lines = [f"# {version}", ",".join(columns)]
    for row in rows:
        lines.append(",".join(fmt(v) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_table(path, columns: tuple[str, ...]) -> dict[str, np.ndarray]:
    data: list[list[float]] = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line == ",".join(columns):
                continue
            vals = [float(v) for v in line.split(",")]
            if len(vals) != len(columns):
                raise RejectedInputError(f"malformed row in {path}: {line!r}")
            data.append(vals)
    arr = np.asarray(data, dtype=float).reshape(len(data), len(columns))
    return {c: arr[:, j] for j, c in enumerate(columns)}


def write_manifest(path, experiment: str, config: dict, outputs: list[str]) -> None:
    """Deterministic manifest: sorted keys, no timestamps."""
    payload = {
        "experiment": experiment,
        "format": "parobs-manifest-v1",
        "config": config,
        "outputs": sorted(outputs),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
