import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from ..ipcurve import IpCurve
from ..model import GroundReaction
from ..sim import TrialSeries

FORCEPLATE_COLUMNS = ("time_s", "fx_n", "fy_n", "fz_n", "copx_m", "copy_m")
IMU_COLUMNS = ("time_s", "ax_mps2", "ay_mps2", "az_mps2")
CURVE_COLUMNS = ("band_hz", "ip_m", "ip_norm", "r2")
FLOAT_FORMAT = "%.17g"


class IngestionError(ValueError):
    """A record file does not follow its schema. `line` is 1-based in the file."""

    def __init__(self, message, line=None, column=None):
        super().__init__(message)
        self.line = line
        self.column = column


# -----------------------------------------------------------------------------
# Domain records
# -----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ForcePlateRecord:
    """Force-plate channels on a uniform time base."""

    time: np.ndarray
    fx: np.ndarray
    fy: np.ndarray
    fz: np.ndarray
    copx: np.ndarray
    copy: np.ndarray
    sample_rate: float
    resampled: bool = False

    @property
    def grf(self):
        return GroundReaction(self.fx, self.fz)

    @property
    def duration(self):
        return self.time.size / self.sample_rate


@dataclass(frozen=True, eq=False)
class ImuRecord:
    time: np.ndarray
    ax: np.ndarray
    ay: np.ndarray
    az: np.ndarray
    sample_rate: float
    resampled: bool = False

    @property
    def duration(self):
        return self.time.size / self.sample_rate


# -----------------------------------------------------------------------------
# CSV helpers
# -----------------------------------------------------------------------------


def _data_lines(path):
    # File line numbers of the data rows (header, comments and blanks skipped).
    with open(path) as f:
        lines = [i + 1 for i, line in enumerate(f) if line.strip() and not line.lstrip().startswith("#")]
    return lines[1:]


def _read_table(path, columns):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: '{path}'")
    try:
        frame = pd.read_csv(path, comment="#", skipinitialspace=True, dtype=str)
    except pd.errors.ParserError as err:
        raise IngestionError(f"{path}: malformed CSV: {err}") from err
    except pd.errors.EmptyDataError as err:
        raise IngestionError(f"{path}: file has no header") from err

    frame.columns = [c.strip() for c in frame.columns]
    for column in columns:
        if column not in frame.columns:
            raise IngestionError(f"{path}: missing column '{column}'", column=column)

    lines = _data_lines(path)
    table = {}
    for column in columns:
        values = pd.to_numeric(frame[column].str.strip(), errors="coerce").to_numpy(dtype=float)
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            row = int(bad[0])
            raise IngestionError(
                f"{path}: line {lines[row]}: column '{column}' holds '{frame[column].iloc[row]}', expected a number",
                line=lines[row],
                column=column,
            )
        table[column] = values
    return table, lines


def _check_time(path, time, lines, max_jitter=0.01):
    if time.size < 2:
        raise IngestionError(f"{path}: at least 2 samples are needed, got {time.size}")
    dt = np.diff(time)
    bad = np.flatnonzero(dt <= 0)
    if bad.size:
        row = int(bad[0]) + 1
        raise IngestionError(
            f"{path}: line {lines[row]}: time {time[row]} s does not increase", line=lines[row], column="time_s"
        )
    step = float(np.median(dt))
    jitter = np.abs(dt - step) / step
    worst = int(np.argmax(jitter))
    if jitter[worst] > max_jitter:
        row = worst + 1
        raise IngestionError(
            f"{path}: line {lines[row]}: sampling interval {dt[worst]:.6g} s deviates {100 * jitter[worst]:.2f}% "
            f"from the median {step:.6g} s (limit {100 * max_jitter:.0f}%)",
            line=lines[row],
            column="time_s",
        )
    return step, bool(jitter[worst] > 1e-6)


def _uniform(time, channels, rate, jittery):
    if not jittery:
        return time, channels, False
    n = int(np.floor((time[-1] - time[0]) * rate + 1e-9)) + 1
    grid = time[0] + np.arange(n) / rate
    warnings.warn(f"sampling jitter within 1%, resampled to {rate:g} Hz by linear interpolation", stacklevel=3)
    return grid, [np.interp(grid, time, c) for c in channels], True


def _nominal_rate(step, rate):
    return float(rate) if rate is not None else float(np.round(1.0 / step, 6))


# -----------------------------------------------------------------------------
# parse_forceplate_csv
# -----------------------------------------------------------------------------


def parse_forceplate_csv(path, rate=None):
    """Read a force-plate CSV (`time_s,fx_n,fy_n,fz_n,copx_m,copy_m`).

    Lines starting with `#` are comments. The sampling rate is inferred from the
    median interval unless `rate` is given; intervals jittering within 1% are
    resampled onto the nominal grid with a warning, larger deviations
    (including gaps) are rejected.

    Parameters
    ----------
    path : str or pathlib.Path
        CSV file.
    rate : float, optional
        Nominal sampling rate (Hz). Defaults to the inferred rate.

    Returns
    -------
    record : ForcePlateRecord
        Validated channels.
    """

    table, lines = _read_table(path, FORCEPLATE_COLUMNS)
    time = table["time_s"]
    step, jittery = _check_time(path, time, lines)

    fz = table["fz_n"]
    bad = np.flatnonzero(~(fz > 0))
    if bad.size:
        row = int(bad[0])
        raise IngestionError(
            f"{path}: line {lines[row]}: fz_n = {fz[row]} N, the vertical force must be positive",
            line=lines[row],
            column="fz_n",
        )

    sample_rate = _nominal_rate(step, rate)
    channels = [table[c] for c in FORCEPLATE_COLUMNS[1:]]
    time, channels, resampled = _uniform(time, channels, sample_rate, jittery)
    fx, fy, fz, copx, copy = channels
    return ForcePlateRecord(time, fx, fy, fz, copx, copy, sample_rate, resampled)


# -----------------------------------------------------------------------------
# parse_imu_csv
# -----------------------------------------------------------------------------


def parse_imu_csv(path, rate=None):
    """Read an IMU CSV (`time_s,ax_mps2,ay_mps2,az_mps2`), see parse_forceplate_csv."""
    table, lines = _read_table(path, IMU_COLUMNS)
    time = table["time_s"]
    step, jittery = _check_time(path, time, lines)
    sample_rate = _nominal_rate(step, rate)
    time, channels, resampled = _uniform(time, [table[c] for c in IMU_COLUMNS[1:]], sample_rate, jittery)
    ax, ay, az = channels
    return ImuRecord(time, ax, ay, az, sample_rate, resampled)


# -----------------------------------------------------------------------------
# Trial files
# -----------------------------------------------------------------------------


def trial_columns(n_joints):
    labels = (1, 2, 3) if n_joints == 3 else (2, 3)
    return (
        ["time_s"]
        + [f"theta{j}" for j in labels]
        + [f"thetadot{j}" for j in labels]
        + [f"tau{j}" for j in labels]
        + ["fx_n", "fz_n", "copx_m", "comax_mps2", "comaz_mps2"]
    )


def write_trial_csv(path, series):
    """Write one trial with 17 significant digits, so that reading it back is exact."""
    n = series.angles.shape[1]
    data = np.column_stack(
        (
            series.time,
            series.angles,
            series.rates,
            series.torques,
            series.fx,
            series.fz,
            series.cop_x,
            series.com_accel,
        )
    )
    pd.DataFrame(data, columns=trial_columns(n)).to_csv(path, index=False, float_format=FLOAT_FORMAT)


def read_trial_csv(path, trial_index=0):
    frame = pd.read_csv(path, comment="#", float_precision="round_trip")
    n = sum(1 for c in frame.columns if c.startswith("theta") and not c.startswith("thetadot"))
    columns = trial_columns(n)
    missing = [c for c in columns if c not in frame.columns]
    if n not in (2, 3) or missing:
        raise IngestionError(f"{path}: not a trial file, missing columns {missing}")
    values = frame[columns].to_numpy(dtype=float)
    return TrialSeries(
        time=values[:, 0],
        angles=values[:, 1 : 1 + n],
        rates=values[:, 1 + n : 1 + 2 * n],
        torques=values[:, 1 + 2 * n : 1 + 3 * n],
        fx=values[:, 1 + 3 * n],
        fz=values[:, 2 + 3 * n],
        cop_x=values[:, 3 + 3 * n],
        com_accel=values[:, 4 + 3 * n : 6 + 3 * n],
        trial_index=trial_index,
    )


def write_json(path, doc):
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def write_manifest(path, doc):
    write_json(path, doc)


def read_json(path):
    with open(path) as f:
        return json.load(f)


# -----------------------------------------------------------------------------
# Curves and spectra
# -----------------------------------------------------------------------------


def write_curve_csv(path, curve):
    frame = pd.DataFrame(
        {
            "band_hz": curve.band_centers,
            "ip_m": curve.ip_height,
            "ip_norm": curve.normalized,
            "r2": curve.regression_r2,
        }
    )
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)


def read_curve_csv(path, reference_height=None):
    """Read an IP curve (`band_hz,ip_m,ip_norm,r2`). Empty heights mark unreliable bands.

    The reference height is recovered from ip_m / ip_norm when not given.
    """

    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: '{path}'")
    frame = pd.read_csv(path, comment="#", float_precision="round_trip")
    for column in CURVE_COLUMNS:
        if column not in frame.columns:
            raise IngestionError(f"{path}: missing column '{column}'", column=column)
    height = frame["ip_m"].to_numpy(dtype=float)
    norm = frame["ip_norm"].to_numpy(dtype=float)
    if reference_height is None:
        usable = np.isfinite(height) & np.isfinite(norm) & (norm != 0)
        if not np.any(usable):
            raise IngestionError(f"{path}: no band gives the reference height, pass it explicitly")
        reference_height = float(np.median(height[usable] / norm[usable]))
    r2 = np.nan_to_num(frame["r2"].to_numpy(dtype=float), nan=0.0)
    return IpCurve(frame["band_hz"].to_numpy(dtype=float), height, reference_height, r2)


def write_psd_csv(path, curve):
    pd.DataFrame({"freq_hz": curve.frequencies, "power": curve.power}).to_csv(
        path, index=False, float_format=FLOAT_FORMAT
    )


# -----------------------------------------------------------------------------
# ANOVA groups
# -----------------------------------------------------------------------------


def read_groups_csv(paths):
    """First numeric column of every CSV, one ANOVA group per file.

    Files without a header row are accepted.
    """

    groups = []
    for path in paths:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"no such file: '{path}'")
        frame = pd.read_csv(path, comment="#")
        try:
            float(frame.columns[0])
            frame = pd.read_csv(path, comment="#", header=None)
        except ValueError:
            pass
        numeric = frame.select_dtypes(include="number")
        if numeric.shape[1] == 0:
            raise IngestionError(f"{path}: no numeric column")
        groups.append(numeric.iloc[:, 0].dropna().to_numpy(dtype=float))
    return groups


# -----------------------------------------------------------------------------
# Images
# -----------------------------------------------------------------------------


def _ppm_tokens(data, count):
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IngestionError("truncated PPM header")
        tokens.append(data[start:pos])
    # Exactly one whitespace byte separates the header from the raster.
    return tokens, pos + 1


def read_ppm(path):
    """Read a binary (P6) PPM with 8-bit channels into an H x W x 3 uint8 array."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: '{path}'")
    data = path.read_bytes()
    tokens, offset = _ppm_tokens(data, 4)
    if tokens[0] != b"P6":
        raise IngestionError(f"{path}: expected a binary P6 PPM, got magic {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as err:
        raise IngestionError(f"{path}: malformed PPM header") from err
    if maxval != 255:
        raise IngestionError(f"{path}: only 8-bit PPM images are supported, got maxval {maxval}")
    expected = width * height * 3
    if len(data) - offset < expected:
        raise IngestionError(f"{path}: raster holds {len(data) - offset} bytes, expected {expected}")
    raster = np.frombuffer(data, dtype=np.uint8, count=expected, offset=offset)
    return raster.reshape(height, width, 3)


def write_ppm(path, image):
    image = np.asarray(image, dtype=np.uint8)
    height, width, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(image).tobytes())


def read_palette(path):
    """JSON object mapping weld classes to [r, g, b] colours."""
    doc = read_json(path)
    if not isinstance(doc, dict):
        raise IngestionError(f"{path}: expected a JSON object of class colours")
    palette = {}
    for cls, color in doc.items():
        valid = isinstance(color, list) and len(color) == 3
        if not valid or any(not isinstance(c, (int, float)) or not 0 <= c <= 255 for c in color):
            raise IngestionError(f"{path}: colour of '{cls}' must be three integers in [0, 255], got {color}")
        palette[cls] = tuple(int(c) for c in color)
    return palette
