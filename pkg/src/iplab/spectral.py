from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from scipy import signal as sps

# -----------------------------------------------------------------------------
# Domain records
# -----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BandSpec:
    """Bank of narrow pass-bands used to build the IP height curve.

    Parameters
    ----------
    centers : numpy.ndarray
        Band centre frequencies (Hz). Defaults to the 38 centres 0.5, 0.7, ...,
        7.9 Hz.
    width : float
        Width of every pass-band (Hz). Defaults to 0.2.
    sample_rate : float
        Sampling rate of the signals the bank is applied to (Hz). Defaults to
        100.
    """

    centers: np.ndarray = None
    width: float = 0.2
    sample_rate: float = 100.0

    def __post_init__(self):
        if self.centers is None:
            object.__setattr__(self, "centers", 0.5 + 0.2 * np.arange(38))
        centers = np.atleast_1d(np.asarray(self.centers, dtype=float))
        object.__setattr__(self, "centers", centers)
        if not self.width > 0:
            raise ValueError(f"band width must be positive, got {self.width}")
        if not self.sample_rate > 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if centers.size == 0:
            raise ValueError("a band spec needs at least one centre frequency")
        steps = np.diff(centers)
        if np.any(steps <= 0):
            raise ValueError("band centres must be strictly increasing")
        # Adjacent bands may touch but not overlap.
        if np.any(steps < self.width * (1 - 1e-9)):
            raise ValueError(f"bands of width {self.width} Hz overlap for the given centres")
        if centers[0] - self.width / 2 <= 0:
            raise ValueError(f"lowest band edge {centers[0] - self.width / 2} Hz must be positive")
        if centers[-1] + self.width / 2 >= self.sample_rate / 2:
            raise ValueError(
                f"highest band edge {centers[-1] + self.width / 2} Hz must lie below Nyquist ({self.sample_rate / 2} Hz)"
            )

    @property
    def n_bands(self):
        return self.centers.size

    def to_dict(self):
        return {"centers": self.centers.tolist(), "width": self.width, "sample_rate": self.sample_rate}

    @classmethod
    def from_dict(cls, doc, sample_rate=None):
        """Accepts explicit `centers` or a `first`/`last`/`step` range."""
        rate = float(doc.get("sample_rate", 100.0) if sample_rate is None else sample_rate)
        width = float(doc.get("width", 0.2))
        if "centers" in doc:
            centers = np.asarray(doc["centers"], dtype=float)
        elif "first" in doc:
            step = float(doc.get("step", width))
            n = int(round((float(doc["last"]) - float(doc["first"])) / step)) + 1
            centers = float(doc["first"]) + step * np.arange(n)
        else:
            centers = None
        return cls(centers, width, rate)


def band_spec_default(sample_rate=100.0):
    """38 bands of 0.2 Hz centred from 0.5 to 7.9 Hz."""
    return BandSpec(sample_rate=sample_rate)


def band_edges(spec):
    """(n_bands, 2) array of lower and upper pass-band edges (Hz)."""
    half = spec.width / 2
    return np.column_stack((spec.centers - half, spec.centers + half))


@dataclass(frozen=True, eq=False)
class PsdCurve:
    """One-sided power spectral density on a uniform grid up to Nyquist."""

    frequencies: np.ndarray
    power: np.ndarray

    def to_dict(self):
        return {"freq_hz": self.frequencies.tolist(), "power": self.power.tolist()}


# -----------------------------------------------------------------------------
# hann
# -----------------------------------------------------------------------------


def hann(series):
    """Apply a symmetric Hann taper, w[k] = 0.5 (1 - cos(2 pi k / (N - 1)))."""
    series = np.asarray(series, dtype=float)
    if series.ndim != 1 or series.size < 2:
        raise ValueError(f"hann window needs a 1-D series of length >= 2, got shape {series.shape}")
    return series * sps.windows.hann(series.size, sym=True)


# -----------------------------------------------------------------------------
# bandpass_zero_lag
# -----------------------------------------------------------------------------


def _band_sos(f_lo, f_hi, fs):
    if not 0 < f_lo < f_hi < fs / 2:
        raise ValueError(f"band edges must satisfy 0 < f_lo < f_hi < fs/2, got f_lo={f_lo}, f_hi={f_hi}, fs={fs}")
    # Order 2 prototype per pass; the digital design prewarps the band edges.
    return sps.butter(2, [f_lo, f_hi], btype="bandpass", fs=fs, output="sos")


def _pad_length(sos, n):
    # Three time constants of the slowest pole.
    _, poles, _ = sps.sos2zpk(sos)
    radius = np.max(np.abs(poles))
    tau = -1.0 / np.log(radius)
    return int(min(np.ceil(3 * tau), n - 1))


def bandpass_zero_lag(series, f_lo, f_hi, fs):
    """Zero-lag 2nd-order Butterworth band-pass.

    The filter runs forward then backward, so the magnitude response is squared
    and the net phase is zero. Edges are padded by odd reflection over three
    time constants of the slowest filter pole and trimmed afterwards.

    Parameters
    ----------
    series : numpy.ndarray
        Uniformly sampled 1-D signal.
    f_lo : float
        Lower pass-band edge (Hz).
    f_hi : float
        Upper pass-band edge (Hz).
    fs : float
        Sampling rate (Hz).

    Returns
    -------
    filtered : numpy.ndarray
        Filtered signal of the input length.
    """

    series = np.asarray(series, dtype=float)
    if series.ndim != 1 or series.size < 2:
        raise ValueError(f"expected a 1-D series of length >= 2, got shape {series.shape}")
    sos = _band_sos(f_lo, f_hi, fs)
    return sps.sosfiltfilt(sos, series, padtype="odd", padlen=_pad_length(sos, series.size))


# -----------------------------------------------------------------------------
# band_decompose
# -----------------------------------------------------------------------------


def _filter_pair(cop, q, f_lo, f_hi, fs):
    return bandpass_zero_lag(cop, f_lo, f_hi, fs), bandpass_zero_lag(q, f_lo, f_hi, fs)


def band_decompose(cop, q, spec, n_jobs=1):
    """Split COP and inclination into the bands of `spec`.

    Both channels are Hann windowed once, then passed through identical
    band-pass filters.

    Parameters
    ----------
    cop : numpy.ndarray
        Centre of pressure (m).
    q : numpy.ndarray
        GRF inclination (rad), same length as `cop`.
    spec : BandSpec
        The band bank.
    n_jobs : int
        joblib workers over bands. Defaults to 1.

    Returns
    -------
    bands : list of tuple
        (cop_b, q_b) per band, in the order of `spec.centers`.
    """

    cop = np.asarray(cop, dtype=float)
    q = np.asarray(q, dtype=float)
    if cop.shape != q.shape:
        raise ValueError(f"cop {cop.shape} and q {q.shape} must have the same shape")
    cop_w = hann(cop)
    q_w = hann(q)
    edges = band_edges(spec)
    if n_jobs == 1:
        return [_filter_pair(cop_w, q_w, lo, hi, spec.sample_rate) for lo, hi in edges]
    return Parallel(n_jobs=n_jobs)(delayed(_filter_pair)(cop_w, q_w, lo, hi, spec.sample_rate) for lo, hi in edges)


# -----------------------------------------------------------------------------
# psd
# -----------------------------------------------------------------------------


def psd(series, fs, segment_seconds=10.0, overlap=0.5):
    """Welch power spectral density.

    Parameters
    ----------
    series : numpy.ndarray
        Uniformly sampled 1-D signal.
    fs : float
        Sampling rate (Hz).
    segment_seconds : float
        Segment length (s). Defaults to 10, a 0.1 Hz resolution.
    overlap : float
        Fraction of overlap between Hann-windowed segments. Defaults to 0.5.

    Returns
    -------
    curve : PsdCurve
        One-sided density, (signal unit)^2 / Hz.
    """

    series = np.asarray(series, dtype=float)
    nperseg = int(round(segment_seconds * fs))
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    if series.ndim != 1 or series.size < nperseg:
        raise ValueError(f"series of {series.size} samples is shorter than one {nperseg}-sample segment")
    frequencies, power = sps.welch(
        series,
        fs=fs,
        window="hann",
        nperseg=nperseg,
        noverlap=int(round(overlap * nperseg)),
        detrend="constant",
        scaling="density",
        return_onesided=True,
    )
    return PsdCurve(frequencies, power)
