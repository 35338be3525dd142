"""Per-sample score conventions for three editing benchmarks, plus aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np


class ScoreRangeError(ValueError):
    pass


class Benchmark(str, Enum):
    GEDIT = "gedit"
    KRIS = "kris"
    IMGEDIT = "imgedit"


class Scale(str, Enum):
    ZERO_TO_TEN = "zero_to_ten"
    ONE_TO_FIVE = "one_to_five"

    @property
    def bounds(self) -> tuple[float, float]:
        return (0.0, 10.0) if self is Scale.ZERO_TO_TEN else (1.0, 5.0)


KRIS_DIMS = ("visual_consistency", "visual_quality", "instruction_following", "knowledge_plausibility")
IMGEDIT_DIMS = ("adherence", "quality", "preservation")
GEDIT_DIMS = ("semantic_consistency", "perceptual_quality")


def _check(name: str, value: float, scale: Scale) -> float:
    lo, hi = scale.bounds
    value = float(value)
    if not lo <= value <= hi:
        raise ScoreRangeError(f"{name}={value!r} outside [{lo:g}, {hi:g}]")
    return value


def vie_overall(sc: float, pq: float) -> float:
    """Geometric mean of semantic consistency and perceptual quality."""
    sc = _check("sc", sc, Scale.ZERO_TO_TEN)
    pq = _check("pq", pq, Scale.ZERO_TO_TEN)
    return math.sqrt(sc * pq)


def imgedit_sample_score(adherence: float, quality: float, preservation: float) -> float:
    """Mean of adherence and the other two axes, each capped at adherence."""
    a = _check("adherence", adherence, Scale.ONE_TO_FIVE)
    q = _check("quality", quality, Scale.ONE_TO_FIVE)
    p = _check("preservation", preservation, Scale.ONE_TO_FIVE)
    return (a + min(q, a) + min(p, a)) / 3.0


def kris_sample_score(dims: Mapping[str, float]) -> float:
    """Mean of the four 1-5 ratings, mapped linearly onto [0, 100]."""
    missing = [d for d in KRIS_DIMS if d not in dims]
    if missing:
        raise ScoreRangeError(f"missing KRIS dimensions: {', '.join(missing)}")
    values = [_check(d, dims[d], Scale.ONE_TO_FIVE) for d in KRIS_DIMS]
    return 25.0 * (sum(values) / 4.0 - 1.0)


@dataclass(frozen=True)
class JudgeRecord:
    benchmark: Benchmark
    dims: Mapping[str, float]
    scale: Scale | None = None
    overall: float = field(init=False)

    def __post_init__(self):
        bench = Benchmark(self.benchmark)
        scale = Scale(self.scale) if self.scale is not None else (
            Scale.ZERO_TO_TEN if bench is Benchmark.GEDIT else Scale.ONE_TO_FIVE
        )
        dims = {str(k): _check(str(k), v, scale) for k, v in sorted(dict(self.dims).items())}
        object.__setattr__(self, "benchmark", bench)
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "overall", sample_overall(bench, dims))


def sample_overall(benchmark: Benchmark, dims: Mapping[str, float]) -> float:
    benchmark = Benchmark(benchmark)
    if benchmark is Benchmark.GEDIT:
        if "overall" in dims and not all(d in dims for d in GEDIT_DIMS):
            return float(dims["overall"])
        return vie_overall(dims["semantic_consistency"], dims["perceptual_quality"])
    if benchmark is Benchmark.IMGEDIT:
        return imgedit_sample_score(*(dims[d] for d in IMGEDIT_DIMS))
    return kris_sample_score(dims)


def _mean_stderr(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    stderr = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
    return {"mean": float(arr.mean()), "stderr": stderr}


def aggregate(records: Sequence[JudgeRecord]) -> dict:
    """Per-dimension and overall mean with standard error.

    Keys are emitted in sorted order so the report serializes identically
    across runs.
    """
    if not records:
        raise ValueError("aggregate needs at least one record")
    benchmarks = {r.benchmark for r in records}
    if len(benchmarks) > 1:
        raise ValueError(f"mixed benchmarks in one aggregate: {sorted(b.value for b in benchmarks)}")
    names = sorted({d for r in records for d in r.dims})
    dims = {}
    for name in names:
        values = [r.dims[name] for r in records if name in r.dims]
        dims[name] = _mean_stderr(values)
    return {
        "benchmark": records[0].benchmark.value,
        "n": len(records),
        "dims": dims,
        "overall": _mean_stderr([r.overall for r in records]),
    }
