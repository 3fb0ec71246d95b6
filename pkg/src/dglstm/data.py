"""Dataset ingestion, per-subject standardization, window extraction, and
the planted-community synthetic generator used for desk-scale validation.

Exchange formats: a manifest is a JSON array of
{subject_id, site, label, csv_path} with csv_path relative to the manifest;
each CSV holds one subject's series, rows = time points, columns = ROIs,
header row optional.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .communities import CommunitySet
from .errors import ConfigError, DataError
from .numeric import derived_rng

AR_COEFF = 0.8  # smoothing of the latent community signals


@dataclass
class SubjectRecord:
    """One subject: standardized (time x ROI) series, binary label, site tag."""

    subject_id: str
    site: str
    label: int
    series: np.ndarray

    @property
    def n_timepoints(self) -> int:
        return self.series.shape[0]

    @property
    def n_rois(self) -> int:
        return self.series.shape[1]


@dataclass
class WindowSample:
    """A (T x R) input window; target is the row right after the window."""

    x: np.ndarray
    target: np.ndarray | None
    label: int
    subject_id: str


def standardize(series: np.ndarray, subject_id: str = "?") -> np.ndarray:
    """Center and scale each ROI column by its own mean and population
    standard deviation (denominator L) over the full series."""
    series = np.asarray(series, dtype=float)
    if series.ndim != 2 or series.shape[0] < 2:
        raise DataError(
            f"subject '{subject_id}': series must be (L >= 2) x R, got {series.shape}")
    mean = series.mean(axis=0)
    sd = series.std(axis=0)
    flat = np.flatnonzero(sd == 0)
    if flat.size:
        raise DataError(
            f"subject '{subject_id}': ROI column {flat[0] + 1} is constant (sd = 0)")
    return (series - mean) / sd


def make_windows(subject: SubjectRecord, t: int,
                 require_target: bool) -> list[WindowSample]:
    """All contiguous length-t windows. With targets there are L - t of them
    (each needs a successor row); without, L - t + 1."""
    if t < 1:
        raise ConfigError(f"window length {t} must be >= 1")
    length = subject.n_timepoints
    needed = t + 1 if require_target else t
    if length < needed:
        raise DataError(
            f"subject '{subject.subject_id}': series length {length} < {needed} "
            f"needed for T={t} windows{' with targets' if require_target else ''}")
    n = length - t if require_target else length - t + 1
    out = []
    for s in range(n):
        target = subject.series[s + t] if require_target else None
        out.append(WindowSample(x=subject.series[s:s + t], target=target,
                                label=subject.label, subject_id=subject.subject_id))
    return out


def _parse_csv(path: str, subject_id: str) -> np.ndarray:
    try:
        with open(path, "r", encoding="utf-8") as f:
            first = f.readline()
    except OSError as exc:
        raise DataError(f"subject '{subject_id}': cannot read '{path}': {exc}") from exc
    header = False
    for tok in first.strip().split(","):
        try:
            float(tok)
        except ValueError:
            header = True
            break
    try:
        arr = np.genfromtxt(path, delimiter=",", skip_header=1 if header else 0,
                            dtype=float, ndmin=2)
    except ValueError as exc:
        raise DataError(f"subject '{subject_id}': malformed CSV '{path}': {exc}") from exc
    bad = np.argwhere(~np.isfinite(arr))
    if bad.size:
        row, col = bad[0]
        raise DataError(
            f"subject '{subject_id}': non-numeric cell in '{path}' at "
            f"row {row + 1}, column {col + 1}")
    return arr


def load_dataset(manifest_path: str) -> list[SubjectRecord]:
    """Parse, validate and standardize every subject listed in a manifest."""
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            entries = json.load(f)
    except OSError as exc:
        raise DataError(f"cannot read manifest '{manifest_path}': {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest '{manifest_path}' is not valid JSON: {exc}") from exc
    if not isinstance(entries, list) or not entries:
        raise DataError(f"manifest '{manifest_path}' must be a non-empty JSON array")

    base = os.path.dirname(os.path.abspath(manifest_path))
    records = []
    n_rois = None
    for i, entry in enumerate(entries):
        for key in ("subject_id", "site", "label", "csv_path"):
            if key not in entry:
                raise DataError(f"manifest entry {i} is missing '{key}'")
        sid = str(entry["subject_id"])
        label = entry["label"]
        if label not in (0, 1):
            raise DataError(f"subject '{sid}': label {label!r} not in {{0, 1}}")
        csv_path = entry["csv_path"]
        if not os.path.isabs(csv_path):
            csv_path = os.path.join(base, csv_path)
        series = _parse_csv(csv_path, sid)
        if n_rois is None:
            n_rois = series.shape[1]
        elif series.shape[1] != n_rois:
            raise DataError(
                f"subject '{sid}': {series.shape[1]} ROI columns, expected {n_rois}")
        records.append(SubjectRecord(subject_id=sid, site=str(entry["site"]),
                                     label=int(label),
                                     series=standardize(series, sid)))
    return records


@dataclass
class SynthConfig:
    """Planted-community generator settings.

    Latent signals are AR(1)-smoothed noise; ROI r mixes its communities'
    signals through a non-negative membership matrix, plus white noise.
    Class-1 subjects scale the first ceil(k_true/2) community amplitudes
    by (1 + coupling); with noise present this raises those communities'
    within-community coherence, which survives per-subject standardization.
    """

    n_subjects: int = 200
    r: int = 20
    l: int = 120
    k_true: int = 4
    overlap: float = 0.1
    coupling: float = 0.5
    noise_sd: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.k_true < 1 or self.k_true > self.r:
            raise ConfigError(f"k_true={self.k_true} must be in [1, r={self.r}]")
        if self.n_subjects < 2:
            raise ConfigError("need at least 2 subjects")
        if self.l < 3:
            raise ConfigError(f"series length {self.l} too short")
        if not 0.0 <= self.overlap <= 1.0:
            raise ConfigError(f"overlap {self.overlap} outside [0, 1]")
        if self.coupling < 0 or self.noise_sd < 0:
            raise ConfigError("coupling and noise_sd must be >= 0")


def _ar1_signals(rng: np.random.Generator, length: int, k: int) -> np.ndarray:
    """(length x k) independent AR(1) streams with unit stationary variance."""
    innov_sd = math.sqrt(1.0 - AR_COEFF ** 2)
    s = np.empty((length, k))
    s[0] = rng.normal(size=k)
    noise = rng.normal(scale=innov_sd, size=(length - 1, k))
    for t in range(1, length):
        s[t] = AR_COEFF * s[t - 1] + noise[t - 1]
    return s


def planted_membership(cfg: SynthConfig) -> np.ndarray:
    """Non-negative (R x K*) membership matrix: every ROI gets one primary
    community (round-robin), and an `overlap` fraction a second one."""
    rng = derived_rng(cfg.seed, 0)
    m = np.zeros((cfg.r, cfg.k_true))
    for roi in range(cfg.r):
        m[roi, roi % cfg.k_true] = rng.uniform(0.8, 1.2)
    n_extra = int(round(cfg.overlap * cfg.r))
    if n_extra and cfg.k_true > 1:
        extra_rois = rng.choice(cfg.r, size=n_extra, replace=False)
        for roi in extra_rois:
            shift = 1 + rng.integers(cfg.k_true - 1)
            second = (roi % cfg.k_true + shift) % cfg.k_true
            m[roi, second] = rng.uniform(0.4, 0.8)
    return m


def synth_generate(cfg: SynthConfig) -> tuple[list[SubjectRecord], CommunitySet]:
    """Generate a labeled dataset plus its planted-community ground truth.

    Records come back already standardized (the same form load_dataset
    produces); the ground truth carries the membership columns as weight
    vectors and their supports as hard sets (1-based ROI indices)."""
    cfg.validate()
    m = planted_membership(cfg)
    designated = list(range(math.ceil(cfg.k_true / 2)))

    records = []
    half = cfg.n_subjects // 2
    for i in range(cfg.n_subjects):
        label = 1 if i >= half else 0
        rng = derived_rng(cfg.seed, 1, i)
        signals = _ar1_signals(rng, cfg.l, cfg.k_true)
        amp = np.ones(cfg.k_true)
        if label == 1:
            amp[designated] *= 1.0 + cfg.coupling
        series = (signals * amp) @ m.T
        if cfg.noise_sd > 0:
            series = series + rng.normal(scale=cfg.noise_sd, size=(cfg.l, cfg.r))
        sid = f"synth{i:04d}"
        records.append(SubjectRecord(subject_id=sid, site="synth", label=label,
                                     series=standardize(series, sid)))

    truth = CommunitySet(
        weights=m.T.copy(),
        members=[set(int(r) + 1 for r in np.flatnonzero(m[:, k] > 0))
                 for k in range(cfg.k_true)],
        source="planted")
    return records, truth


def write_dataset(records: list[SubjectRecord], out_dir: str,
                  truth: CommunitySet | None = None) -> str:
    """Write per-subject CSVs plus manifest.json (and ground_truth.json when
    a planted truth is given). Returns the manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for rec in records:
        csv_name = f"{rec.subject_id}.csv"
        np.savetxt(os.path.join(out_dir, csv_name), rec.series,
                   delimiter=",", fmt="%.17g")
        entries.append({"subject_id": rec.subject_id, "site": rec.site,
                        "label": rec.label, "csv_path": csv_name})
    manifest_path = os.path.join(out_dir, "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(entries, f, indent=2, sort_keys=True)
        f.write("\n")
    if truth is not None:
        truth.save(os.path.join(out_dir, "ground_truth.json"))
    return manifest_path
