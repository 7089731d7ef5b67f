"""Saliency-profile matrices: persistence, per-filter statistics, excesses.

On disk a profile set is a ``manifest.json`` plus a raw little-endian
float32 matrix (row = sample, column = filter, row-major, no header), so any
external framework can emit the format with a few lines of code.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InsufficientDataError, ParameterError

MANIFEST_VERSION = 1
DTYPE_TAG = "f32le"
MATRIX_FILENAME = "profiles.f32"
DEFAULT_QUANTILE = 0.90


@dataclass(frozen=True)
class FilterMeta:
    filter_id: int
    layer_name: str
    layer_group: str
    num_params: int


@dataclass(frozen=True)
class FilterStats:
    """Reference statistics for one filter.

    std is the population standard deviation (divisor N); threshold is the
    empirical quantile with linear interpolation; n_exceed counts strict
    exceedances of the threshold.
    """

    mean: float
    std: float
    threshold: float
    n_exceed: int
    n_total: int


class SaliencyMatrix:
    """N x L matrix of nonnegative per-filter saliency profiles.

    Values are held as float32, matching the wire format, so a save/load
    round trip is bit-exact. Treated as immutable after construction.
    """

    def __init__(self, values, filters: list[FilterMeta]):
        v = np.asarray(values, dtype=np.float32)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise FormatError(f"matrix must be 2-D and nonempty, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise FormatError("saliency matrix contains non-finite entries")
        if np.any(v < 0.0):
            raise FormatError("saliency matrix contains negative entries")
        if len(filters) != v.shape[1]:
            raise FormatError(
                f"{len(filters)} filter records for {v.shape[1]} matrix columns"
            )
        for i, meta in enumerate(filters):
            if meta.filter_id != i:
                raise FormatError("filter_id values must be contiguous from 0")
            if meta.num_params < 1:
                raise FormatError(f"filter {i} has num_params < 1")
        self.values = v
        self.filters = list(filters)

    @property
    def num_samples(self) -> int:
        return int(self.values.shape[0])

    @property
    def num_filters(self) -> int:
        return int(self.values.shape[1])

    def column(self, filter_id: int) -> np.ndarray:
        if not 0 <= filter_id < self.num_filters:
            raise IndexError(f"filter_id {filter_id} out of range")
        return self.values[:, filter_id].astype(np.float64)


def aggregate_filter_profile(param_saliencies) -> float:
    """Mean of one filter's parameter-wise saliencies."""
    arr = np.asarray(param_saliencies, dtype=float)
    if arr.size == 0:
        raise InsufficientDataError("cannot aggregate an empty saliency list")
    if not np.all(np.isfinite(arr)) or np.any(arr < 0.0):
        raise ParameterError("parameter saliencies must be finite and nonnegative")
    return float(arr.mean())


def compute_stats(matrix: SaliencyMatrix, quantile: float = DEFAULT_QUANTILE) -> list[FilterStats]:
    """Per-filter mean, population std, threshold and exceedance count."""
    if not 0.0 < quantile < 1.0:
        raise ParameterError(f"quantile must lie in (0, 1), got {quantile!r}")
    if matrix.num_samples < 2:
        raise InsufficientDataError(
            f"need at least 2 samples to compute stats, got {matrix.num_samples}"
        )
    v = matrix.values.astype(np.float64)
    means = v.mean(axis=0)
    stds = v.std(axis=0)
    thresholds = np.quantile(v, quantile, axis=0)
    n_exceed = (v > thresholds).sum(axis=0)
    return [
        FilterStats(
            mean=float(means[j]),
            std=float(stds[j]),
            threshold=float(thresholds[j]),
            n_exceed=int(n_exceed[j]),
            n_total=matrix.num_samples,
        )
        for j in range(matrix.num_filters)
    ]


def excesses_for_filter(matrix: SaliencyMatrix, filter_id: int, threshold: float) -> np.ndarray:
    """Strict exceedances of one filter column, shifted to excesses over the
    threshold, in row order."""
    col = matrix.column(filter_id)
    return col[col > threshold] - threshold


def save_profiles(matrix: SaliencyMatrix, dir_path) -> Path:
    """Write manifest + matrix file into ``dir_path``; returns the manifest path."""
    out = Path(dir_path)
    out.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(matrix.values.astype("<f4"))
    (out / MATRIX_FILENAME).write_bytes(payload.tobytes())
    manifest = {
        "version": MANIFEST_VERSION,
        "num_samples": matrix.num_samples,
        "num_filters": matrix.num_filters,
        "dtype": DTYPE_TAG,
        "matrix_file": MATRIX_FILENAME,
        "filters": [
            {
                "filter_id": m.filter_id,
                "layer_name": m.layer_name,
                "layer_group": m.layer_group,
                "num_params": m.num_params,
            }
            for m in matrix.filters
        ],
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return manifest_path


def load_profiles(manifest_path) -> SaliencyMatrix:
    """Load a manifest + matrix pair written by :func:`save_profiles` or any
    format-conforming exporter."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read manifest {manifest_path}: {exc}") from exc
    try:
        version = manifest["version"]
        n = int(manifest["num_samples"])
        l = int(manifest["num_filters"])
        dtype = manifest["dtype"]
        matrix_file = manifest["matrix_file"]
        filter_records = manifest["filters"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"manifest {manifest_path} is missing fields: {exc}") from exc
    if version != MANIFEST_VERSION:
        raise FormatError(f"unsupported manifest version {version!r}")
    if dtype != DTYPE_TAG:
        raise FormatError(f"unsupported dtype {dtype!r}")

    raw = (manifest_path.parent / matrix_file).read_bytes()
    expected = n * l * 4
    if len(raw) != expected:
        raise FormatError(
            f"matrix file holds {len(raw)} bytes, manifest declares "
            f"{n}x{l} float32 = {expected}"
        )
    values = np.frombuffer(raw, dtype="<f4").reshape(n, l)
    try:
        filters = [
            FilterMeta(
                filter_id=int(rec["filter_id"]),
                layer_name=str(rec["layer_name"]),
                layer_group=str(rec["layer_group"]),
                num_params=int(rec["num_params"]),
            )
            for rec in filter_records
        ]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad filter record in {manifest_path}: {exc}") from exc
    return SaliencyMatrix(values, filters)
