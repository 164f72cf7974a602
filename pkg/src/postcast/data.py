"""Dataset ingestion, chronological splitting, windowing and the
prediction-file interchange format.

The engine never talks to a forecasting model directly: base forecasts
arrive either from a prediction file (CSV + JSON sidecar) produced by any
external runner, or from the built-in persistence/ridge baselines that give
the repository a self-contained demo path.

All ingestion is eager: files are fully validated before anything reaches
the optimizer.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .batch import ForecastBatch, SplitSpec
from .errors import AlignmentError, ConfigError, CsvParseError, ValidationError

INDEX_COLUMN_NAMES = {"date", "time"}


@dataclass(frozen=True)
class RawSeries:
    """A [T x d] numeric matrix in time order.

    `start_row` is the offset of the first row within the original series,
    so window identifiers stay globally unique after splitting.
    """

    values: np.ndarray
    column_names: tuple[str, ...]
    start_row: int = 0

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2:
            raise ValidationError(f"series must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("series contains non-finite values")
        if len(self.column_names) != arr.shape[1]:
            raise ValidationError(
                f"{len(self.column_names)} column names for {arr.shape[1]} columns"
            )
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "column_names", tuple(self.column_names))

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class WindowSpec:
    window: int
    horizon: int
    stride: int = 1

    def __post_init__(self):
        for name, v in (("window", self.window), ("horizon", self.horizon), ("stride", self.stride)):
            if v < 1:
                raise ConfigError(f"{name} must be >= 1, got {v}")


def parse_csv(data: bytes | str) -> RawSeries:
    """Parse an uploaded CSV into a validated series.

    One header row of column names is required; an optional first column
    named date/time is treated as the index and dropped from the values.
    Failures name the offending data row and column.
    """
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    reader = csv.reader(io.StringIO(text))
    rows = [row for row in reader if row]
    if not rows:
        raise CsvParseError("empty CSV file")
    header = [h.strip() for h in rows[0]]
    if not header or all(not h for h in header):
        raise CsvParseError("missing header row")
    drop_index = header[0].lower() in INDEX_COLUMN_NAMES
    names = header[1:] if drop_index else header
    if not names:
        raise CsvParseError("no value columns after the index column")
    if len(rows) == 1:
        raise CsvParseError("CSV has a header but no data rows")

    width = len(header)
    out = np.empty((len(rows) - 1, len(names)), dtype=np.float64)
    for i, row in enumerate(rows[1:], start=1):
        if len(row) != width:
            raise CsvParseError(
                f"row {i}: expected {width} cells, got {len(row)}"
            )
        cells = row[1:] if drop_index else row
        for j, cell in enumerate(cells):
            try:
                v = float(cell)
            except ValueError:
                raise CsvParseError(
                    f"row {i} column {names[j]}: non-numeric value {cell.strip()!r}"
                ) from None
            if not np.isfinite(v):
                raise CsvParseError(
                    f"row {i} column {names[j]}: non-finite value {cell.strip()!r}"
                )
            out[i - 1, j] = v
    return RawSeries(out, tuple(names))


def serialize_csv(series: RawSeries) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(series.column_names)
    for row in series.values:
        writer.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def chronological_split(
    series: RawSeries, spec: SplitSpec, window: WindowSpec | None = None
) -> tuple[RawSeries, RawSeries, RawSeries]:
    """Contiguous train/val/test segments in time order, no shuffling.

    Fractional row counts are floored and the remainder goes to train. When
    a window spec is given, every segment must be able to host at least one
    window.
    """
    t = series.n_rows
    n_train = int(t * spec.train_fraction)
    n_val = int(t * spec.val_fraction)
    n_test = int(t * spec.test_fraction)
    n_train += t - (n_train + n_val + n_test)

    minimum = (window.window + window.horizon) if window else 1
    if min(n_train, n_val, n_test) < minimum:
        raise ConfigError(
            f"series of {t} rows cannot host the requested splits: each segment "
            f"needs at least {minimum} rows "
            f"(got train={n_train}, val={n_val}, test={n_test})"
        )

    def segment(lo: int, hi: int) -> RawSeries:
        return RawSeries(
            series.values[lo:hi], series.column_names, start_row=series.start_row + lo
        )

    return (
        segment(0, n_train),
        segment(n_train, n_train + n_val),
        segment(n_train + n_val, t),
    )


@dataclass(frozen=True)
class WindowSet:
    """Sliding windows over one segment: contexts, targets and their ids.

    sample_id encodes the global row offset of the window start, so windows
    from different segments of the same series never collide.
    """

    contexts: np.ndarray  # (n, W, d)
    targets: np.ndarray  # (n, H, d)
    sample_ids: tuple[str, ...]

    def __len__(self) -> int:
        return self.contexts.shape[0]

    def __iter__(self):
        return iter(zip(self.contexts, self.targets, self.sample_ids))


def make_windows(series: RawSeries, spec: WindowSpec) -> WindowSet:
    """Windows at offsets 0, stride, 2*stride, ... within the segment."""
    t = series.n_rows
    w, h, stride = spec.window, spec.horizon, spec.stride
    if w + h > t:
        raise ConfigError(
            f"segment of {t} rows cannot host window {w} + horizon {h}"
        )
    view = np.lib.stride_tricks.sliding_window_view(series.values, w + h, axis=0)
    view = view[: t - w - h + 1 : stride].transpose(0, 2, 1)  # (n, W+H, d)
    contexts = np.ascontiguousarray(view[:, :w, :])
    targets = np.ascontiguousarray(view[:, w:, :])
    ids = tuple(
        f"w{series.start_row + k}" for k in range(0, t - w - h + 1, stride)
    )
    return WindowSet(contexts, targets, ids)


@dataclass(frozen=True)
class PredictionFile:
    """Forecasts for a set of windows, one row per (sample, channel).

    CSV columns: sample_id, channel, h1..hH. A JSON sidecar records the
    producing configuration: {"window", "horizon", "channels", "model"}.
    """

    values: dict[tuple[str, int], np.ndarray]
    window: int
    horizon: int
    channels: int
    model: str = "external"

    def sample_ids(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for sid, _ in self.values:
            seen.setdefault(sid, None)
        return tuple(seen)


def sidecar_path(csv_path: str | Path) -> Path:
    p = Path(csv_path)
    return p.with_name(p.name + ".meta.json")


def write_prediction_file(
    path: str | Path,
    predictions: np.ndarray,
    sample_ids,
    window: int,
    model: str,
) -> None:
    """Write (n, H, d) predictions as the interchange CSV + sidecar."""
    arr = np.asarray(predictions, dtype=np.float64)
    n, h, d = arr.shape
    path = Path(path)
    with path.open("w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["sample_id", "channel"] + [f"h{i}" for i in range(1, h + 1)])
        for i, sid in enumerate(sample_ids):
            for ch in range(d):
                writer.writerow([sid, ch] + [repr(float(v)) for v in arr[i, :, ch]])
    meta = {"window": window, "horizon": h, "channels": d, "model": model}
    sidecar_path(path).write_text(json.dumps(meta, sort_keys=True) + "\n")


def read_prediction_file(path: str | Path) -> PredictionFile:
    path = Path(path)
    side = sidecar_path(path)
    if not side.exists():
        raise ValidationError(f"missing metadata sidecar {side}")
    meta = json.loads(side.read_text())
    for key in ("window", "horizon", "channels", "model"):
        if key not in meta:
            raise ValidationError(f"sidecar {side} missing field {key!r}")
    h = int(meta["horizon"])

    values: dict[tuple[str, int], np.ndarray] = {}
    with path.open(newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        expected = ["sample_id", "channel"] + [f"h{i}" for i in range(1, h + 1)]
        if header != expected:
            raise ValidationError(
                f"prediction file header mismatch: got {header}, expected {expected}"
            )
        for i, row in enumerate(reader, start=1):
            if len(row) != 2 + h:
                raise ValidationError(f"prediction row {i}: wrong cell count")
            sid, ch = row[0], int(row[1])
            key = (sid, ch)
            if key in values:
                raise ValidationError(f"duplicate prediction record for {key}")
            try:
                vec = np.array([float(c) for c in row[2:]], dtype=np.float64)
            except ValueError:
                raise ValidationError(f"prediction row {i}: non-numeric value") from None
            if not np.all(np.isfinite(vec)):
                raise ValidationError(f"prediction row {i}: non-finite value")
            values[key] = vec
    return PredictionFile(
        values=values,
        window=int(meta["window"]),
        horizon=h,
        channels=int(meta["channels"]),
        model=str(meta["model"]),
    )


def load_predictions(pred_file: PredictionFile, windows: WindowSet) -> ForecastBatch:
    """Align file records with window targets by (sample_id, channel)."""
    n = len(windows)
    h, d = windows.targets.shape[1], windows.targets.shape[2]
    if pred_file.horizon != h:
        raise AlignmentError(
            f"prediction horizon {pred_file.horizon} != window horizon {h}"
        )
    if pred_file.channels != d:
        raise AlignmentError(
            f"prediction channels {pred_file.channels} != window channels {d}"
        )
    missing = [
        (sid, ch)
        for sid in windows.sample_ids
        for ch in range(d)
        if (sid, ch) not in pred_file.values
    ]
    if missing:
        preview = ", ".join(f"{sid}/ch{ch}" for sid, ch in missing[:5])
        raise AlignmentError(
            f"{len(missing)} missing prediction records (first: {preview})"
        )
    preds = np.empty((n, h, d), dtype=np.float64)
    for i, sid in enumerate(windows.sample_ids):
        for ch in range(d):
            preds[i, :, ch] = pred_file.values[(sid, ch)]
    return ForecastBatch(preds, windows.targets, windows.sample_ids)


def persistence_forecast(contexts: np.ndarray, horizon: int) -> np.ndarray:
    """Repeat the last context row H times."""
    ctx = np.asarray(contexts, dtype=np.float64)
    return np.repeat(ctx[:, -1:, :], horizon, axis=1)


class RidgeForecaster:
    """Per-channel linear map from the W context lags to the H outputs.

    Fit with an L2 penalty on the weights (never the intercept) via the
    normal equations; one weight matrix per channel.
    """

    def __init__(self, window: int, horizon: int, lam: float = 1e-2):
        if lam < 0:
            raise ConfigError("ridge penalty must be non-negative")
        self.window = window
        self.horizon = horizon
        self.lam = lam
        self.weights_: np.ndarray | None = None  # (d, W, H)
        self.intercepts_: np.ndarray | None = None  # (d, H)

    def fit(self, contexts: np.ndarray, targets: np.ndarray) -> "RidgeForecaster":
        ctx = np.asarray(contexts, dtype=np.float64)
        tgt = np.asarray(targets, dtype=np.float64)
        n, w, d = ctx.shape
        h = tgt.shape[1]
        if w != self.window or h != self.horizon:
            raise ConfigError("contexts/targets disagree with the configured (W, H)")
        self.weights_ = np.empty((d, w, h))
        self.intercepts_ = np.empty((d, h))
        eye = np.eye(w)
        for ch in range(d):
            x = ctx[:, :, ch]
            y = tgt[:, :, ch]
            x_mean = x.mean(axis=0)
            y_mean = y.mean(axis=0)
            xc = x - x_mean
            yc = y - y_mean
            beta = np.linalg.solve(xc.T @ xc + self.lam * eye, xc.T @ yc)
            self.weights_[ch] = beta
            self.intercepts_[ch] = y_mean - x_mean @ beta
        return self

    def predict(self, contexts: np.ndarray) -> np.ndarray:
        if self.weights_ is None:
            raise ValidationError("ridge forecaster is not fitted")
        ctx = np.asarray(contexts, dtype=np.float64)
        n, w, d = ctx.shape
        out = np.empty((n, self.horizon, d))
        for ch in range(d):
            out[:, :, ch] = ctx[:, :, ch] @ self.weights_[ch] + self.intercepts_[ch]
        return out


BASELINE_NAMES = ("persistence", "ridge")


def baseline_predictions(
    name: str,
    train_windows: WindowSet,
    spec: WindowSpec,
    lam: float = 1e-2,
) -> "Baseline":
    """Build one of the built-in forecasters, fit on the train split only."""
    if name == "persistence":
        return Baseline(name, None, spec)
    if name == "ridge":
        model = RidgeForecaster(spec.window, spec.horizon, lam=lam)
        model.fit(train_windows.contexts, train_windows.targets)
        return Baseline(name, model, spec)
    raise ConfigError(f"unknown baseline {name!r}; expected one of {BASELINE_NAMES}")


@dataclass
class Baseline:
    name: str
    model: RidgeForecaster | None
    spec: WindowSpec

    def predict(self, windows: WindowSet) -> np.ndarray:
        if self.model is not None:
            return self.model.predict(windows.contexts)
        return persistence_forecast(windows.contexts, self.spec.horizon)

    def batch(self, windows: WindowSet) -> ForecastBatch:
        return ForecastBatch(
            self.predict(windows), windows.targets, windows.sample_ids
        )


def normalize_series(
    series: RawSeries, mean: np.ndarray, std: np.ndarray
) -> RawSeries:
    """Per-channel z-score with the provided (train-split) statistics."""
    safe = np.where(std > 0, std, 1.0)
    return replace(series, values=(series.values - mean) / safe)


def channel_stats(series: RawSeries) -> tuple[np.ndarray, np.ndarray]:
    return series.values.mean(axis=0), series.values.std(axis=0)
