"""Consensus selection over sampled action chunks.

Each hypothesis is mapped to the trajectory it would trace from the start
state (cumulative position and orientation per step, flattened step-major).
``select_standard`` picks the hypothesis with the lowest average distance to
the whole set; ``select_density`` picks the medoid of the densest r-NN pocket.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import ActionChunk, InvalidInputError, RobotState, integrate_chunk


class Metric(str, enum.Enum):
    L1 = "l1"
    L2 = "l2"
    LINF = "linf"
    COSINE = "cos"
    CORRELATION = "corr"

    @classmethod
    def parse(cls, name: "str | Metric") -> "Metric":
        if isinstance(name, Metric):
            return name
        aliases = {"cosine": "cos", "correlation": "corr", "r": "corr", "chebyshev": "linf",
                   "l_inf": "linf", "inf": "linf"}
        key = aliases.get(name.lower(), name.lower())
        try:
            return cls(key)
        except ValueError:
            raise InvalidInputError(f"unknown metric {name!r}") from None

    @property
    def is_norm(self) -> bool:
        return self in (Metric.L1, Metric.L2, Metric.LINF)


class Mode(str, enum.Enum):
    STANDARD = "standard"
    DENSITY = "density"


def extract_features(start: RobotState, chunk: ActionChunk, chunk_size: int | None = None) -> np.ndarray:
    if chunk_size is not None:
        chunk.check_size(chunk_size)
    states = integrate_chunk(start, chunk)
    return np.array([c for s in states for c in (*s.pos, *s.rot)], dtype=np.float64)


@dataclass
class HypothesisSet:
    chunks: list[ActionChunk]
    features: np.ndarray
    start_state: RobotState = field(default_factory=RobotState)

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != len(self.chunks):
            raise InvalidInputError("features must be an (N, 6H) array aligned with chunks")
        if len(self.chunks) < 2:
            raise InvalidInputError(f"need at least 2 hypotheses, got {len(self.chunks)}")
        if not np.all(np.isfinite(self.features)):
            raise InvalidInputError("non-finite features")

    @classmethod
    def from_chunks(cls, start: RobotState, chunks: Sequence[ActionChunk],
                    chunk_size: int | None = None) -> "HypothesisSet":
        feats = np.stack([extract_features(start, c, chunk_size) for c in chunks])
        return cls(list(chunks), feats, start)

    @classmethod
    def from_features(cls, features: np.ndarray) -> "HypothesisSet":
        """Bare feature matrix (no chunks); used by evaluation and tests."""
        features = np.asarray(features, dtype=np.float64)
        h = max(1, features.shape[1] // 6)
        chunks = [ActionChunk.zeros(h, origin_seed=i) for i in range(features.shape[0])]
        return cls(chunks, features)

    def __len__(self) -> int:
        return len(self.chunks)


@dataclass
class MbrResult:
    selected_index: int
    risks: np.ndarray
    distance_matrix: np.ndarray
    mode: Mode
    radii: np.ndarray | None = None
    pocket: list[int] | None = None

    def to_json_dict(self) -> dict:
        d = {
            "selected_index": int(self.selected_index),
            "mode": self.mode.value,
            "risks": [float(x) for x in self.risks],
            "distance_matrix": [[float(x) for x in row] for row in self.distance_matrix],
        }
        if self.radii is not None:
            d["radii"] = [float(x) for x in self.radii]
            d["pocket"] = [int(i) for i in self.pocket]
        return d


def _zscore(features: np.ndarray) -> np.ndarray:
    mu = features.mean(axis=0)
    sd = features.std(axis=0)
    sd[sd == 0.0] = 1.0
    return (features - mu) / sd


def _angular(feats: np.ndarray, scale: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.einsum("ij,ij->i", feats, feats))
    deg = norms <= 1e-12 * scale
    safe = np.where(deg, 1.0, norms)
    unit = feats / safe[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    d = np.clip(1.0 - sim, 0.0, 2.0)
    # degenerate (zero or constant) vectors: both -> identical, one -> orthogonal
    both = deg[:, None] & deg[None, :]
    one = deg[:, None] ^ deg[None, :]
    d[both] = 0.0
    d[one] = 1.0
    return d


def pairwise_distances(hyps: HypothesisSet | np.ndarray, metric: Metric | str = Metric.L2,
                       normalize_features: bool = False) -> np.ndarray:
    """Symmetric N x N distance matrix with an exactly zero diagonal."""
    metric = Metric.parse(metric)
    feats = hyps.features if isinstance(hyps, HypothesisSet) else np.asarray(hyps, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise InvalidInputError("need an (N, D) feature matrix with N >= 2")
    if normalize_features:
        feats = _zscore(feats)
    if metric.is_norm:
        diff = np.abs(feats[:, None, :] - feats[None, :, :])
        if metric is Metric.L1:
            m = diff.sum(axis=-1)
        elif metric is Metric.L2:
            m = np.sqrt((diff * diff).sum(axis=-1))
        else:
            m = diff.max(axis=-1)
    else:
        scale = np.maximum(1.0, np.abs(feats).max(axis=1)) * math.sqrt(feats.shape[1])
        if metric is Metric.CORRELATION:
            feats = feats - feats.mean(axis=1, keepdims=True)
        m = _angular(feats, scale)
    upper = np.triu(m, 1)
    return upper + upper.T


def _row_means(m: np.ndarray) -> np.ndarray:
    # fixed left-to-right summation so parallel/sequential builds agree bitwise
    n = m.shape[0]
    out = np.empty(n)
    for i in range(n):
        s = 0.0
        for v in m[i]:
            s += float(v)
        out[i] = s / n
    return out


def select_from_matrix(m: np.ndarray) -> MbrResult:
    risks = _row_means(m)
    return MbrResult(int(np.argmin(risks)), risks, m, Mode.STANDARD)


def select_standard(hyps: HypothesisSet | np.ndarray, metric: Metric | str = Metric.L2,
                    normalize_features: bool = False) -> MbrResult:
    return select_from_matrix(pairwise_distances(hyps, metric, normalize_features))


def adaptive_r(n: int) -> int:
    if n < 2:
        raise InvalidInputError(f"adaptive_r needs n >= 2, got {n}")
    return max(2, min(4, math.isqrt(n)))


def _neighbours(m: np.ndarray, i: int) -> list[int]:
    """Other indices ordered by (distance, index)."""
    return sorted((j for j in range(m.shape[0]) if j != i), key=lambda j: (m[i, j], j))


def density_from_matrix(m: np.ndarray) -> MbrResult:
    n = m.shape[0]
    r = adaptive_r(n)
    if n - 1 < r:
        res = select_from_matrix(m)
        return MbrResult(res.selected_index, res.risks, m, Mode.DENSITY)
    order = [_neighbours(m, i) for i in range(n)]
    radii = np.array([m[i, order[i][r - 1]] for i in range(n)])
    center = int(np.argmin(radii))
    pocket = sorted([center, *order[center][:r]])
    best, best_score = pocket[0], math.inf
    for p in pocket:
        s = 0.0
        for q in pocket:
            if q != p:
                s += float(m[p, q])
        score = s / (len(pocket) - 1)
        if score < best_score:
            best, best_score = p, score
    return MbrResult(best, _row_means(m), m, Mode.DENSITY, radii=radii, pocket=pocket)


def select_density(hyps: HypothesisSet | np.ndarray, metric: Metric | str = Metric.L2,
                   normalize_features: bool = False) -> MbrResult:
    return density_from_matrix(pairwise_distances(hyps, metric, normalize_features))


def select(hyps: HypothesisSet | np.ndarray, metric: Metric | str = Metric.L2,
           mode: Mode | str = Mode.DENSITY, normalize_features: bool = False) -> MbrResult:
    mode = Mode(mode)
    if mode is Mode.STANDARD:
        return select_standard(hyps, metric, normalize_features)
    return select_density(hyps, metric, normalize_features)
