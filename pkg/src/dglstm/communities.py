"""Functional-community extraction and the correlation-tensor baseline.

Two routes produce `CommunitySet`s over the same ROI universe:

* model route — each column of the learned generative map is a community
  weight vector; its hard member set is the high cluster of an exact 1-D
  two-means split of the column.
* tensor route — stack clamped per-window correlation matrices into an
  (R x R x S) tensor and fit a symmetric non-negative PARAFAC
  T ~= sum_k a_k (x) a_k (x) c_k; the a_k columns play the same role.

Member sets use 1-based ROI indices everywhere they are reported.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DegenerateStatsError
from .numeric import derived_rng, require_finite


@dataclass
class CommunitySet:
    """K communities over R ROIs: weight rows (K x R), hard member sets
    (1-based ROI indices), and a tag for which route produced them."""

    weights: np.ndarray
    members: list[set[int]]
    source: str
    degenerate: list[bool] = field(default_factory=list)

    SOURCES = ("lstm", "cd", "planted")

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.source not in self.SOURCES:
            raise ConfigError(f"source must be one of {self.SOURCES}, "
                              f"got '{self.source}'")
        if self.weights.ndim != 2:
            raise ConfigError(f"weights must be K x R, got {self.weights.shape}")
        if len(self.members) != self.weights.shape[0]:
            raise ConfigError("one member set per weight row required")
        if not self.degenerate:
            self.degenerate = [False] * self.weights.shape[0]
        r = self.weights.shape[1]
        for k, s in enumerate(self.members):
            if any(not 1 <= roi <= r for roi in s):
                raise ConfigError(f"community {k}: member indices must lie in 1..{r}")

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def r(self) -> int:
        return self.weights.shape[1]

    def sizes(self) -> list[int]:
        return [len(s) for s in self.members]

    def to_json_dict(self) -> dict:
        return {
            "source": self.source,
            "n_communities": self.k,
            "n_rois": self.r,
            "members": [sorted(s) for s in self.members],
            "degenerate": list(self.degenerate),
            "weights": [[float(v) for v in row] for row in self.weights],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "CommunitySet":
        return cls(weights=np.asarray(d["weights"], dtype=float),
                   members=[set(int(i) for i in s) for s in d["members"]],
                   source=str(d["source"]),
                   degenerate=[bool(b) for b in d.get("degenerate", [])])

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path: str) -> "CommunitySet":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json_dict(json.load(f))


def split_two_means(values: np.ndarray) -> tuple[np.ndarray, float]:
    """Exact 1-D 2-means: enumerate the R-1 sorted-threshold splits and keep
    the one with minimum within-cluster SSE (ties break toward the smallest
    low cluster, i.e. the largest high-mean cluster).

    Returns (boolean mask of the high-mean cluster, best SSE).
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size < 2:
        raise ConfigError(f"need at least 2 values to split, got {v.size}")
    order = np.argsort(v, kind="stable")
    sv = v[order]
    n = v.size
    csum = np.cumsum(sv)
    csq = np.cumsum(sv * sv)
    # split m = size of the low cluster, m in 1..n-1
    m = np.arange(1, n)
    low_sse = csq[m - 1] - csum[m - 1] ** 2 / m
    high_sum = csum[-1] - csum[m - 1]
    high_sse = (csq[-1] - csq[m - 1]) - high_sum ** 2 / (n - m)
    total = low_sse + high_sse
    best = int(np.argmin(total))
    mask = np.zeros(n, dtype=bool)
    mask[order[best + 1:]] = True
    return mask, float(total[best])


def kmeans_1d(values: np.ndarray, k: int = 2, n_restarts: int = 10,
              seed: int = 0) -> tuple[np.ndarray, np.ndarray, float]:
    """Plain Lloyd's with k-means++ seeding; kept as an independent
    cross-check for split_two_means. Returns (labels, centers, sse)."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size < k:
        raise ConfigError(f"need >= {k} values, got {v.size}")
    rng = derived_rng(seed, 97)
    best_sse, best_labels, best_centers = np.inf, None, None
    for _ in range(n_restarts):
        centers = [v[rng.integers(v.size)]]
        while len(centers) < k:
            d2 = np.min([(v - c) ** 2 for c in centers], axis=0)
            if d2.sum() == 0:
                centers.append(v[rng.integers(v.size)])
            else:
                centers.append(v[rng.choice(v.size, p=d2 / d2.sum())])
        centers = np.asarray(centers)
        for _ in range(100):
            labels = np.argmin(np.abs(v[:, None] - centers[None, :]), axis=1)
            new = np.array([v[labels == j].mean() if np.any(labels == j)
                            else centers[j] for j in range(k)])
            if np.allclose(new, centers):
                break
            centers = new
        sse = float(np.sum((v - centers[labels]) ** 2))
        if sse < best_sse - 1e-12:
            best_sse, best_labels, best_centers = sse, labels, centers
    return best_labels, best_centers, best_sse


def extract_communities(w_d: np.ndarray, b_d: np.ndarray | None = None,
                        source: str = "lstm") -> CommunitySet:
    """Turn an (R x K) non-negative generative weight matrix into K
    communities: members of community k are the ROIs in the high-mean
    cluster of column k. A constant column cannot be split; it is flagged
    degenerate with an empty member set and a warning. The bias b_d plays
    no role in membership and is accepted only for interface symmetry."""
    w_d = np.asarray(w_d, dtype=float)
    if w_d.ndim != 2 or w_d.shape[0] < 2:
        raise ConfigError(f"weight matrix must be (R >= 2) x K, got {w_d.shape}")
    require_finite("community weights", w_d)
    if np.any(w_d < 0):
        raise ConfigError("community weight matrix must be non-negative")
    members, degenerate = [], []
    for k in range(w_d.shape[1]):
        col = w_d[:, k]
        if col.max() == col.min():
            warnings.warn(f"community {k + 1}: constant weight column, "
                          "no members assigned", stacklevel=2)
            members.append(set())
            degenerate.append(True)
            continue
        mask, _ = split_two_means(col)
        members.append(set(int(i) + 1 for i in np.flatnonzero(mask)))
        degenerate.append(False)
    return CommunitySet(weights=w_d.T.copy(), members=members,
                        source=source, degenerate=degenerate)


def correlation_matrix(series: np.ndarray) -> np.ndarray:
    """Pearson correlation across the ROI columns of a (T x R) window."""
    series = np.asarray(series, dtype=float)
    if series.ndim != 2 or series.shape[0] < 3:
        raise DataError(f"window must be (T >= 3) x R, got {series.shape}")
    sd = series.std(axis=0)
    flat = np.flatnonzero(sd == 0)
    if flat.size:
        raise DataError(f"ROI column {flat[0] + 1} is constant within the window")
    z = (series - series.mean(axis=0)) / sd
    corr = z.T @ z / series.shape[0]
    corr = 0.5 * (corr + corr.T)
    np.fill_diagonal(corr, 1.0)
    return np.clip(corr, -1.0, 1.0)


def build_tensor(windows: list[np.ndarray]) -> np.ndarray:
    """Stack per-window correlation matrices, negatives clamped to zero,
    into an (R x R x S) tensor."""
    if not windows:
        raise DataError("no windows supplied for tensor construction")
    slices = []
    r = None
    for s, w in enumerate(windows):
        try:
            corr = correlation_matrix(w)
        except DataError as exc:
            raise DataError(f"window {s}: {exc}") from exc
        if r is None:
            r = corr.shape[0]
        elif corr.shape[0] != r:
            raise DataError(f"window {s}: {corr.shape[0]} ROIs, expected {r}")
        slices.append(np.maximum(corr, 0.0))
    return np.stack(slices, axis=2)


@dataclass
class ParafacResult:
    """Symmetric NN-PARAFAC factors: a (R x K), c (S x K), plus fit trace."""

    a: np.ndarray
    c: np.ndarray
    fit: float
    fit_history: list[float]
    sweeps: int
    converged: bool


def _reconstruct(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    outer = a[:, None, :] * b[None, :, :]          # (R, R, K)
    return np.tensordot(outer, c, axes=([2], [1]))  # (R, R, S)


def _hals_pass(fac: np.ndarray, mtk: np.ndarray, gram: np.ndarray) -> None:
    """One cyclic HALS update of `fac` in place, clamping at zero.
    mtk is the matricized-tensor-times-Khatri-Rao product, gram the
    elementwise product of the other factors' Gram matrices."""
    for k in range(fac.shape[1]):
        denom = gram[k, k]
        if denom <= 1e-12:
            continue
        upd = fac[:, k] + (mtk[:, k] - fac @ gram[:, k]) / denom
        fac[:, k] = np.maximum(upd, 0.0)


def nn_parafac_symmetric(tensor: np.ndarray, k: int, max_sweeps: int = 500,
                         tol: float = 1e-6, seed: int = 0) -> ParafacResult:
    """Fit T ~= sum_k a_k (x) a_k (x) c_k with all factors non-negative.

    HALS column updates on modes 1 and 2 (then averaged and re-clamped to
    keep them tied), followed by mode 3; fit = 1 - ||T - T^||_F / ||T||_F
    is recorded each sweep, and iteration stops when its relative change
    drops below `tol` or at `max_sweeps`.
    """
    tensor = np.asarray(tensor, dtype=float)
    if tensor.ndim != 3 or tensor.shape[0] != tensor.shape[1]:
        raise ConfigError(f"tensor must be R x R x S, got {tensor.shape}")
    if k < 1:
        raise ConfigError(f"need k >= 1 communities, got {k}")
    if np.any(tensor < 0):
        raise ConfigError("tensor must be non-negative")
    require_finite("tensor", tensor)
    # the a_k = b_k model only makes sense for slice-symmetric tensors, and
    # the sweep's monotone-descent property relies on that symmetry
    asym = float(np.abs(tensor - tensor.transpose(1, 0, 2)).max())
    if asym > 1e-12 * max(1.0, float(np.abs(tensor).max())):
        raise ConfigError(f"tensor slices must be symmetric "
                          f"(max asymmetry {asym:.3e})")
    norm_t = float(np.linalg.norm(tensor))
    if norm_t == 0:
        raise DegenerateStatsError("all-zero tensor: fit is undefined")

    r, _, s = tensor.shape
    rng = derived_rng(seed, 3)
    a = rng.random((r, k))
    b = a.copy()
    c = rng.random((s, k))

    # one global least-squares rescale so the first sweeps start near the
    # right magnitude (a bad overall scale can make early sweeps regress)
    approx = _reconstruct(a, b, c)
    denom = float(np.sum(approx * approx))
    if denom > 0:
        scale = max(float(np.sum(tensor * approx)) / denom, 1e-12)
        a *= scale ** (1.0 / 3.0)
        b *= scale ** (1.0 / 3.0)
        c *= scale ** (1.0 / 3.0)

    fit_history: list[float] = []
    prev_fit = None
    converged = False
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        gram_c = c.T @ c
        # mode 1: T_(1) khatri-rao(C, B)
        tmp = np.tensordot(tensor, c, axes=([2], [0]))      # (R, R, K)
        mtk = np.einsum("ijk,jk->ik", tmp, b)
        _hals_pass(a, mtk, (b.T @ b) * gram_c)
        # mode 2 with the updated A
        mtk = np.einsum("ijk,ik->jk", tmp, a)
        _hals_pass(b, mtk, (a.T @ a) * gram_c)
        # re-tie the two symmetric modes
        a = np.maximum(0.5 * (a + b), 0.0)
        b = a.copy()
        # mode 3
        outer = a[:, None, :] * a[None, :, :]
        mtk = np.tensordot(tensor, outer, axes=([0, 1], [0, 1]))  # (S, K)
        gram_a = a.T @ a
        _hals_pass(c, mtk, gram_a * gram_a)

        resid = float(np.linalg.norm(tensor - _reconstruct(a, a, c)))
        fit = 1.0 - resid / norm_t
        fit_history.append(fit)
        if prev_fit is not None:
            if abs(fit - prev_fit) / max(abs(prev_fit), 1e-12) < tol:
                converged = True
                break
        prev_fit = fit

    return ParafacResult(a=a, c=c, fit=fit_history[-1], fit_history=fit_history,
                         sweeps=sweeps, converged=converged)


def tensor_communities(result: ParafacResult) -> CommunitySet:
    """Read communities off the symmetric-mode factor columns, using the
    same high-cluster rule as the model route."""
    return extract_communities(result.a, source="cd")


def dsc(a: set[int], b: set[int]) -> float:
    """Dice coefficient 2|A&B| / (|A| + |B|); two empty sets give 0.0
    (with a warning) rather than an error."""
    if not a and not b:
        warnings.warn("DSC of two empty sets defined as 0.0", stacklevel=2)
        return 0.0
    return 2.0 * len(a & b) / (len(a) + len(b))


def _weight_corr(u: np.ndarray, v: np.ndarray) -> float:
    su, sv = u.std(), v.std()
    if su == 0 or sv == 0:
        return 0.0
    return float(np.mean((u - u.mean()) * (v - v.mean())) / (su * sv))


@dataclass
class RobustnessReport:
    """Best-match agreement between a reference community set and another
    (e.g. two halves of a cohort). Matching is by maximum, with replacement,
    independently for the correlation and DSC panels."""

    ref_source: str
    other_source: str
    ref_sizes: list[int]
    other_sizes: list[int]
    best_corr: list[float]
    best_dsc: list[float]

    @property
    def mean_corr(self) -> float:
        return float(np.mean(self.best_corr))

    @property
    def mean_dsc(self) -> float:
        return float(np.mean(self.best_dsc))

    def to_json_dict(self) -> dict:
        return {
            "ref_source": self.ref_source,
            "other_source": self.other_source,
            "matching": "best-match-with-replacement",
            "ref_sizes": self.ref_sizes,
            "other_sizes": self.other_sizes,
            "best_corr": [float(v) for v in self.best_corr],
            "best_dsc": [float(v) for v in self.best_dsc],
            "mean_corr": self.mean_corr,
            "mean_dsc": self.mean_dsc,
        }

    def save_csv(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f)
            w.writerow(["community", "ref_size", "best_match_corr", "best_match_dsc"])
            for k in range(len(self.best_corr)):
                w.writerow([k + 1, self.ref_sizes[k],
                            f"{self.best_corr[k]:.6f}", f"{self.best_dsc[k]:.6f}"])
            w.writerow(["mean", "", f"{self.mean_corr:.6f}", f"{self.mean_dsc:.6f}"])


def robustness(ref: CommunitySet, other: CommunitySet) -> RobustnessReport:
    """For every reference community, the best weight-vector correlation and
    the best member-set DSC over all communities of `other` (matched
    independently, with replacement)."""
    if ref.r != other.r:
        raise ConfigError(f"ROI universes differ: {ref.r} vs {other.r}")
    if other.k < 1 or ref.k < 1:
        raise ConfigError("both community sets must be non-empty")
    best_corr, best_dsc = [], []
    for k in range(ref.k):
        best_corr.append(max(_weight_corr(ref.weights[k], other.weights[j])
                             for j in range(other.k)))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            best_dsc.append(max(dsc(ref.members[k], other.members[j])
                                for j in range(other.k)))
    return RobustnessReport(ref_source=ref.source, other_source=other.source,
                            ref_sizes=ref.sizes(), other_sizes=other.sizes(),
                            best_corr=best_corr, best_dsc=best_dsc)
