"""Error statistics for sketch round trips and the collision/bound models."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np
from scipy import stats

from .hashing import HashFamily, derive_seed
from .sketch import SketchConfig, SketchState, Variant, compress_unit, decompress_unit

# log-spaced relative-error buckets, 4 per decade over [1e-4, 1e1)
HIST_EDGES = np.logspace(-4, 1, 21)
HIST_LABELS = (
    ["exact"]
    + ["<1e-04"]
    + [f"[{lo:.2e},{hi:.2e})" for lo, hi in zip(HIST_EDGES[:-1], HIST_EDGES[1:])]
    + [">=1e+01"]
)


@dataclass
class CompressionReport:
    weight_count: int
    mean_relative_error: float
    max_relative_error: float
    sign_error_rate: float
    untouched_fraction: float
    unoccupied_fraction: float
    zero_weight_count: int
    relative_error_histogram: list[int] = field(default_factory=list)
    quantized: bool = False

    def to_text(self) -> str:
        lines = [
            f"weight_count={self.weight_count}",
            f"mean_relative_error={self.mean_relative_error:.9g}",
            f"max_relative_error={self.max_relative_error:.9g}",
            f"sign_error_rate={self.sign_error_rate:.9g}",
            f"untouched_fraction={self.untouched_fraction:.9g}",
            f"unoccupied_fraction={self.unoccupied_fraction:.9g}",
            f"zero_weight_count={self.zero_weight_count}",
            f"quantized={'true' if self.quantized else 'false'}",
        ]
        lines += [f"hist[{lab}]={c}" for lab, c in zip(HIST_LABELS, self.relative_error_histogram)]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        d = asdict(self)
        d["histogram_labels"] = HIST_LABELS
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CompressionReport":
        d = json.loads(text)
        d.pop("histogram_labels", None)
        return cls(**d)


def relative_errors(original: np.ndarray, approx: np.ndarray) -> np.ndarray:
    """``|w - w'| / |w|`` for the nonzero originals (float64)."""
    w = np.asarray(original, np.float64)
    a = np.asarray(approx, np.float64)
    nz = w != 0
    return np.abs(w[nz] - a[nz]) / np.abs(w[nz])


def report(
    original,
    approx,
    states: SketchState | Iterable[SketchState] | None = None,
    quantized: bool = False,
) -> CompressionReport:
    """Compare a weight vector with its reconstruction.

    Zero-valued originals have no relative error; they are tallied in
    ``zero_weight_count`` and left out of the histogram and the means.
    """
    w32 = np.asarray(original, np.float32).ravel()
    a32 = np.asarray(approx, np.float32).ravel()
    if w32.shape != a32.shape:
        raise ValueError(f"length mismatch: {w32.size} original vs {a32.size} approx")
    n = int(w32.size)
    w = w32.astype(np.float64)
    a = a32.astype(np.float64)
    nz = w != 0
    rel = np.abs(w[nz] - a[nz]) / np.abs(w[nz])

    hist = np.zeros(len(HIST_LABELS), np.int64)
    hist[0] = int(np.count_nonzero(rel == 0))
    pos = rel[rel > 0]
    hist[1] = int(np.count_nonzero(pos < HIST_EDGES[0]))
    hist[2:-1] = np.histogram(pos[(pos >= HIST_EDGES[0]) & (pos < HIST_EDGES[-1])], bins=HIST_EDGES)[0]
    hist[-1] = int(np.count_nonzero(pos >= HIST_EDGES[-1]))

    sign_err = nz & (a != 0) & (np.signbit(w) != np.signbit(a))
    untouched = w32.view(np.uint32) == a32.view(np.uint32)

    if states is None:
        unocc = 0.0
    else:
        if isinstance(states, SketchState):
            states = [states]
        states = list(states)
        cells = sum(s.occupied.size for s in states)
        empty = sum(int(s.occupied.size - np.count_nonzero(s.occupied)) for s in states)
        unocc = empty / cells if cells else 0.0

    return CompressionReport(
        weight_count=n,
        mean_relative_error=float(rel.mean()) if rel.size else 0.0,
        max_relative_error=float(rel.max()) if rel.size else 0.0,
        sign_error_rate=float(sign_err.sum() / n) if n else 0.0,
        untouched_fraction=float(untouched.sum() / n) if n else 1.0,
        unoccupied_fraction=float(unocc),
        zero_weight_count=int(n - nz.sum()),
        relative_error_histogram=[int(c) for c in hist],
        quantized=quantized,
    )


# -- collision model ---------------------------------------------------------


def expected_unoccupied(k: int, m: int) -> float:
    """Probability a given bucket stays empty after ``k`` uniform inserts."""
    if k < 0 or m < 1:
        raise ValueError(f"need k >= 0 and m >= 1, got k={k}, m={m}")
    if m == 1:
        return 1.0 if k == 0 else 0.0
    return math.exp(k * math.log1p(-1.0 / m))


@dataclass(frozen=True)
class CollisionModel:
    """Per-bucket load of ``k`` items hashed into ``m`` buckets."""

    k: int
    m: int

    @property
    def expected_load(self) -> float:
        return self.k / self.m

    @property
    def expected_empty_fraction(self) -> float:
        return expected_unoccupied(self.k, self.m)

    def load_pmf(self, n):
        return stats.binom.pmf(n, self.k, 1.0 / self.m)

    def empty_fraction_std(self) -> float:
        """Standard deviation of the empty-bucket fraction (exact occupancy variance)."""
        k, m = self.k, self.m
        q1 = expected_unoccupied(k, m)
        q2 = 0.0 if m <= 2 else math.exp(k * math.log1p(-2.0 / m))
        var = m * q1 + m * (m - 1) * q2 - (m * q1) ** 2
        return math.sqrt(max(var, 0.0)) / m


# -- probabilistic lower bound on a bucket minimum ---------------------------


@dataclass(frozen=True)
class Distribution:
    """Weight distribution: a sampler plus its quantile function."""

    name: str
    sample: Callable[[np.random.Generator, int], np.ndarray]
    ppf: Callable[[np.ndarray], np.ndarray]

    @classmethod
    def normal(cls, loc: float = 0.0, scale: float = 1.0) -> "Distribution":
        d = stats.norm(loc, scale)
        return cls("normal", lambda rng, n: rng.normal(loc, scale, n), d.ppf)

    @classmethod
    def laplace(cls, loc: float = 0.0, scale: float = 1.0) -> "Distribution":
        d = stats.laplace(loc, scale)
        return cls("laplace", lambda rng, n: rng.laplace(loc, scale, n), d.ppf)

    @classmethod
    def empirical(cls, data) -> "Distribution":
        x = np.sort(np.asarray(data, np.float64).ravel())
        if x.size == 0:
            raise ValueError("empirical distribution needs data")

        def ppf(q):
            return np.quantile(x, np.clip(q, 0.0, 1.0), method="inverted_cdf")

        return cls("empirical", lambda rng, n: rng.choice(x, n), ppf)

    @classmethod
    def constant(cls, c: float) -> "Distribution":
        return cls("constant", lambda rng, n: np.full(n, c, np.float64), lambda q: np.full(np.shape(q), c, np.float64))


def error_lower_bound(p: float, n, ppf: Callable) -> np.ndarray | float:
    """Level the minimum of ``n`` i.i.d. draws stays above with probability ``p``.

    ``L = ppf(1 - p ** (1 / n))``. ``n`` may be an array of bucket loads.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    n_arr = np.asarray(n, np.float64)
    if np.any(n_arr < 1):
        raise ValueError("collision count n must be >= 1")
    out = ppf(1.0 - p ** (1.0 / n_arr))
    return float(out) if np.ndim(out) == 0 else np.asarray(out)


@dataclass(frozen=True)
class BoundCheck:
    p: float
    coverage: float
    buckets: int
    sketches: int

    @property
    def std_error(self) -> float:
        return math.sqrt(self.p * (1 - self.p) / self.buckets)


def verify_bound(
    dist: Distribution,
    k: int,
    m: int,
    p: float,
    trials: int = 10_000,
    seed: int = 0,
) -> BoundCheck:
    """Monte Carlo coverage of the bucket-minimum lower bound.

    Whole sketches of ``k`` weights over ``m`` buckets are drawn (fresh hash
    seed and weights each time) until at least ``trials`` occupied buckets
    have been seen. Coverage is the share of occupied buckets whose minimum
    is at least the bound for that bucket's load.
    """
    if trials < 1 or k < 1 or m < 1:
        raise ValueError("k, m and trials must be positive")
    rng = np.random.default_rng(seed)
    hits = 0
    buckets = 0
    sketches = 0
    addrs = np.arange(k)
    while buckets < trials:
        family = HashFamily.from_master(derive_seed(seed, sketches), 1)
        cols = family.indices(0, addrs, m)
        w = dist.sample(rng, k)
        mins = np.full(m, np.inf)
        np.minimum.at(mins, cols, w)
        load = np.bincount(cols, minlength=m)
        occ = load > 0
        bound = error_lower_bound(p, load[occ], dist.ppf)
        hits += int(np.count_nonzero(mins[occ] >= bound))
        buckets += int(occ.sum())
        sketches += 1
    return BoundCheck(p=p, coverage=hits / buckets, buckets=buckets, sketches=sketches)


def countmin_tradeoff(rows: int, columns: float) -> tuple[float, float]:
    """CountMin rule of thumb: failure probability ~ e^-rows, accuracy ~ e/columns.

    These are the classical CountMin heuristics, reported as-is; they are not
    derived for AbsMaxMin.
    """
    if rows < 1 or columns < 1:
        raise ValueError("rows and columns must be >= 1")
    return math.exp(-rows), math.e / columns


def round_trip(weights, config: SketchConfig) -> tuple[np.ndarray, SketchState]:
    state = compress_unit(weights, config)
    return decompress_unit(state, state.weight_count), state


def compare_variants(weights, configs: Mapping[Variant, SketchConfig]) -> dict[Variant, CompressionReport]:
    """Round-trip ``weights`` through each variant at an equal state budget."""
    sizes = {cfg.size for cfg in configs.values()}
    if len(sizes) > 1:
        raise ValueError(f"variants must share one state budget, got sizes {sorted(sizes)}")
    w = np.asarray(weights, np.float32).ravel()
    out = {}
    for variant, cfg in configs.items():
        if cfg.variant is not variant:
            raise ValueError(f"config for {variant.value} has variant {cfg.variant.value}")
        approx, state = round_trip(w, cfg)
        out[variant] = report(w, approx, state)
    return out
