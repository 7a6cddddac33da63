import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .spectral import band_decompose

DESCRIPTOR_DEFINITION = (
    "iplab-descriptors/1: y(f) = c0 + c1*exp(-c2*f) fitted to h_IP/h_ref over reliable bands; "
    "crossover = smallest f with y(f) = 1; hfa_slope = dy/df at the highest band centre"
)


class IpCurveError(RuntimeError):
    """An IP curve was rejected or its descriptors could not be fitted."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = {} if diagnostics is None else diagnostics


# -----------------------------------------------------------------------------
# Domain records
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class SamplingSpec:
    rate: float

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError(f"sampling rate must be positive, got {self.rate}")

    @property
    def step(self):
        return 1.0 / self.rate


@dataclass(frozen=True, eq=False)
class IpCurve:
    """IP height per frequency band.

    Unreliable bands carry NaN heights and are left out of descriptor fits and
    objectives.

    Parameters
    ----------
    band_centers : numpy.ndarray
        Band centre frequencies (Hz).
    ip_height : numpy.ndarray
        Estimated IP height per band (m).
    reference_height : float
        Height used for normalisation (m), the COM height or, for kneeling
        virtual descriptors, the upright stance COM height.
    regression_r2 : numpy.ndarray
        Coefficient of determination of each band regression.
    reliable : numpy.ndarray, optional
        Boolean mask of usable bands. Defaults to the finite heights.
    """

    band_centers: np.ndarray
    ip_height: np.ndarray
    reference_height: float
    regression_r2: np.ndarray
    reliable: np.ndarray = None

    def __post_init__(self):
        centers = np.asarray(self.band_centers, dtype=float)
        height = np.asarray(self.ip_height, dtype=float)
        r2 = np.asarray(self.regression_r2, dtype=float)
        reliable = np.isfinite(height) if self.reliable is None else np.asarray(self.reliable, dtype=bool)
        if not centers.shape == height.shape == r2.shape == reliable.shape:
            raise ValueError("band_centers, ip_height, regression_r2 and reliable must have equal lengths")
        if not self.reference_height > 0:
            raise ValueError(f"reference_height must be positive, got {self.reference_height}")
        if np.any((r2 < 0) | (r2 > 1)):
            raise ValueError("regression_r2 values must lie in [0, 1]")
        height = np.where(reliable, height, np.nan)
        object.__setattr__(self, "band_centers", centers)
        object.__setattr__(self, "ip_height", height)
        object.__setattr__(self, "regression_r2", r2)
        object.__setattr__(self, "reliable", reliable & np.isfinite(height))
        object.__setattr__(self, "reference_height", float(self.reference_height))

    @property
    def normalized(self):
        return self.ip_height / self.reference_height

    @property
    def n_reliable(self):
        return int(np.count_nonzero(self.reliable))

    def with_reference(self, reference_height):
        return IpCurve(self.band_centers, self.ip_height, reference_height, self.regression_r2, self.reliable)

    def to_dict(self):
        def clean(values):
            return [None if not np.isfinite(v) else float(v) for v in values]

        return {
            "band_hz": self.band_centers.tolist(),
            "ip_m": clean(self.ip_height),
            "ip_norm": clean(self.normalized),
            "r2": self.regression_r2.tolist(),
            "reliable": self.reliable.tolist(),
            "reference_height": self.reference_height,
        }


@dataclass(frozen=True)
class IpDescriptors:
    """Crossover frequency and high-frequency asymptote of a normalised IP curve.

    `crossover_hz` is NaN when the fitted curve never reaches 1 inside the band
    range (`crossover_absent` is then True).
    """

    crossover_hz: float
    hfa_slope: float
    asymptote_level: float
    fit_params: tuple
    crossover_raw_hz: float = float("nan")
    tail_slope: float = float("nan")
    crossover_absent: bool = False
    n_bands: int = 0
    definition: str = DESCRIPTOR_DEFINITION

    def __post_init__(self):
        object.__setattr__(self, "fit_params", tuple(float(c) for c in self.fit_params))
        if self.fit_params[2] < 0:
            raise ValueError(f"decay rate c2 must be non-negative, got {self.fit_params[2]}")

    def to_dict(self):
        def clean(v):
            return None if not np.isfinite(v) else float(v)

        return {
            "crossover_hz": clean(self.crossover_hz),
            "crossover_raw_hz": clean(self.crossover_raw_hz),
            "crossover_absent": self.crossover_absent,
            "hfa_slope": clean(self.hfa_slope),
            "tail_slope": clean(self.tail_slope),
            "asymptote_level": clean(self.asymptote_level),
            "fit_params": list(self.fit_params),
            "n_bands": self.n_bands,
            "definition": self.definition,
        }


# -----------------------------------------------------------------------------
# q_angle
# -----------------------------------------------------------------------------


def q_angle(grf):
    """Small-angle inclination of the ground reaction force, q = F_x / F_z."""
    fx = np.asarray(grf.fx, dtype=float)
    fz = np.asarray(grf.fz, dtype=float)
    if fx.shape != fz.shape:
        raise ValueError(f"fx {fx.shape} and fz {fz.shape} must have the same shape")
    bad = np.flatnonzero(~(np.atleast_1d(fz) > 0))
    if bad.size:
        raise ValueError(f"vertical force must be positive, got fz = {np.atleast_1d(fz)[bad[0]]} at sample {bad[0]}")
    return fx / fz


# -----------------------------------------------------------------------------
# ip_height_band
# -----------------------------------------------------------------------------


def ip_height_band(cop_b, q_b, intercept=False, min_r2=0.05, min_samples=100):
    """IP height of one band as the reciprocal slope of q_b against cop_b.

    Parameters
    ----------
    cop_b : numpy.ndarray
        Band-limited COP (m).
    q_b : numpy.ndarray
        Band-limited force-line inclination (rad), same length.
    intercept : bool
        Fit a free intercept instead of a line through the origin. Defaults to
        False.
    min_r2 : float
        Bands whose regression explains less than this are unreliable.
        Defaults to 0.05.
    min_samples : int
        Minimum series length. Defaults to 100.

    Returns
    -------
    h : float
        IP height (m), NaN for an unreliable band.
    r2 : float
        Coefficient of determination of the regression, in [0, 1].
    """

    cop_b = np.asarray(cop_b, dtype=float)
    q_b = np.asarray(q_b, dtype=float)
    if cop_b.shape != q_b.shape or cop_b.ndim != 1:
        raise ValueError(f"cop_b {cop_b.shape} and q_b {q_b.shape} must be 1-D and of equal length")
    if cop_b.size < min_samples:
        raise ValueError(f"band regression needs at least {min_samples} samples, got {cop_b.size}")

    if intercept:
        x = cop_b - cop_b.mean()
        y = q_b - q_b.mean()
    else:
        x, y = cop_b, q_b
    sxx = x @ x
    syy = y @ y
    if sxx <= np.finfo(float).tiny or syy <= np.finfo(float).tiny:
        return float("nan"), 0.0

    slope = (x @ y) / sxx
    r2 = float(np.clip((x @ y) ** 2 / (sxx * syy), 0.0, 1.0))
    if abs(slope) < 1e-9 or r2 < min_r2:
        return float("nan"), r2
    return float(1.0 / slope), r2


def ip_height_pointwise(cop, q, sampling):
    """Time-resolved IP height from consecutive samples.

    h(t) = -(cop(t + dt) - cop(t)) / (q(t + dt) - q(t)), with q = F_x / F_z.
    Samples where q does not change give NaN.

    Returns
    -------
    time : numpy.ndarray
        Start time of every sample pair (s).
    h : numpy.ndarray
        IP height (m), one shorter than the inputs.
    """

    cop = np.asarray(cop, dtype=float)
    q = np.asarray(q, dtype=float)
    if cop.shape != q.shape:
        raise ValueError(f"cop {cop.shape} and q {q.shape} must have the same shape")
    d_cop = np.diff(cop)
    d_q = np.diff(q)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = np.where(d_q != 0, -d_cop / d_q, np.nan)
    return np.arange(h.size) * sampling.step, h


# -----------------------------------------------------------------------------
# ip_curve
# -----------------------------------------------------------------------------


def ip_curve(cop, grf, spec, reference_height, intercept=False, max_unreliable=0.5, n_jobs=1):
    """IP height curve of one record.

    The force line inclination measured from the COP towards the IP is -q. Both
    it and the COP are mean-removed, Hann windowed and split into the bands of
    `spec`; each band is regressed with ip_height_band.

    Parameters
    ----------
    cop : numpy.ndarray
        Anterior-posterior COP (m), sampled at `spec.sample_rate`.
    grf : GroundReaction
        Ground reaction force series of the same length.
    spec : BandSpec
        The band bank.
    reference_height : float
        Normalisation height (m).
    intercept : bool
        Free-intercept band regressions. Defaults to False.
    max_unreliable : float
        Largest tolerated fraction of unreliable bands. Defaults to 0.5.
    n_jobs : int
        joblib workers over bands. Defaults to 1.

    Returns
    -------
    curve : IpCurve
        Heights, r^2 and reliability of every band.
    """

    cop = np.asarray(cop, dtype=float)
    inclination = -q_angle(grf)
    if cop.shape != inclination.shape:
        raise ValueError(f"cop {cop.shape} and GRF {inclination.shape} series must have the same length")

    bands = band_decompose(cop - cop.mean(), inclination - inclination.mean(), spec, n_jobs=n_jobs)
    fits = [ip_height_band(cop_b, q_b, intercept=intercept) for cop_b, q_b in bands]
    height = np.array([h for h, _ in fits])
    r2 = np.array([r for _, r in fits])
    curve = IpCurve(spec.centers, height, reference_height, r2)

    n_bad = spec.n_bands - curve.n_reliable
    if n_bad > max_unreliable * spec.n_bands:
        raise IpCurveError(
            f"{n_bad} of {spec.n_bands} bands are unreliable",
            diagnostics={"unreliable_bands": spec.centers[~curve.reliable].tolist(), "r2": r2.tolist()},
        )
    if n_bad:
        warnings.warn(f"{n_bad} unreliable bands excluded: {spec.centers[~curve.reliable]}", stacklevel=2)
    return curve


def mean_curve(curves, min_fraction=0.5):
    """Band-wise mean IP height over curves sharing one band grid.

    A band of the mean curve is reliable when at least `min_fraction` of the
    curves are reliable there; the mean uses those curves only.
    """

    curves = list(curves)
    if not curves:
        raise ValueError("mean_curve needs at least one curve")
    first = curves[0]
    for other in curves[1:]:
        if other.band_centers.shape != first.band_centers.shape or not np.allclose(
            other.band_centers, first.band_centers
        ):
            raise ValueError("curves do not share a band grid")
        if not np.isclose(other.reference_height, first.reference_height):
            raise ValueError("curves do not share a reference height")

    heights = np.vstack([c.ip_height for c in curves])
    mask = np.vstack([c.reliable for c in curves])
    count = mask.sum(axis=0)
    total = np.where(mask, heights, 0.0).sum(axis=0)
    reliable = count >= min_fraction * len(curves)
    with np.errstate(invalid="ignore", divide="ignore"):
        height = np.where(reliable & (count > 0), total / np.maximum(count, 1), np.nan)
    r2 = np.vstack([c.regression_r2 for c in curves]).mean(axis=0)
    return IpCurve(first.band_centers, height, first.reference_height, r2, reliable)


# -----------------------------------------------------------------------------
# descriptors
# -----------------------------------------------------------------------------


def _exponential(params, f):
    c0, c1, c2 = params
    return c0 + c1 * np.exp(-c2 * f)


def _raw_crossover(f, y):
    above = y - 1.0
    if above[0] == 0:
        return float(f[0])
    crossings = np.flatnonzero(above[:-1] * above[1:] <= 0)
    if crossings.size == 0:
        return float("nan")
    i = crossings[0]
    return float(f[i] + (f[i + 1] - f[i]) * above[i] / (above[i] - above[i + 1]))


def tail_slope(curve, n_bands=15):
    """Least-squares slope of the normalised curve over its top reliable bands (1/Hz)."""
    f = curve.band_centers[curve.reliable][-n_bands:]
    y = curve.normalized[curve.reliable][-n_bands:]
    if f.size < 2:
        return float("nan")
    return float(np.polyfit(f, y, 1)[0])


def descriptors(curve, min_bands=10, max_nfev=2000):
    """Crossover frequency and HFA slope from an exponential fit.

    The normalised curve y = h_IP / h_ref is fitted with
    y(f) = c0 + c1 exp(-c2 f), c2 >= 0, by bounded damped least squares.

    Parameters
    ----------
    curve : IpCurve
        Curve with at least `min_bands` reliable bands.
    min_bands : int
        Defaults to 10.
    max_nfev : int
        Iteration bound of the least-squares solver. Defaults to 2000.

    Returns
    -------
    desc : IpDescriptors
        crossover_hz is the smallest band-range frequency where the fitted
        curve equals 1 (the first band when it already does), hfa_slope is
        -c1 c2 exp(-c2 f_max) and asymptote_level is c0. The linearly
        interpolated raw crossing and the linear tail slope are reported too.
    """

    f = curve.band_centers[curve.reliable]
    y = curve.normalized[curve.reliable]
    if f.size < min_bands:
        raise IpCurveError(
            f"descriptor fit needs {min_bands} reliable bands, got {f.size}",
            diagnostics={"n_reliable": int(f.size)},
        )

    c2_0 = 1.0
    c0_0 = y[-1]
    c1_0 = (y[0] - y[-1]) * np.exp(c2_0 * f[0])

    result = optimize.least_squares(
        lambda p: _exponential(p, f) - y,
        x0=[c0_0, c1_0, c2_0],
        bounds=([-np.inf, -np.inf, 0.0], [np.inf, np.inf, np.inf]),
        method="trf",
        x_scale="jac",
        max_nfev=max_nfev,
    )
    if not result.success or not np.all(np.isfinite(result.x)):
        raise IpCurveError(
            f"exponential fit did not converge: {result.message}",
            diagnostics={"status": int(result.status), "nfev": int(result.nfev), "params": result.x.tolist()},
        )

    params = result.x
    c0, c1, c2 = params
    f_lo, f_hi = curve.band_centers[0], curve.band_centers[-1]
    gap_lo = _exponential(params, f_lo) - 1.0
    gap_hi = _exponential(params, f_hi) - 1.0

    absent = False
    if abs(gap_lo) <= 1e-9:
        crossover = float(f_lo)
    elif gap_lo * gap_hi < 0:
        crossover = float(optimize.brentq(lambda x: _exponential(params, x) - 1.0, f_lo, f_hi, xtol=1e-12))
    elif abs(gap_hi) <= 1e-9:
        crossover = float(f_hi)
    else:
        crossover = float("nan")
        absent = True
        warnings.warn("fitted IP curve does not cross 1 inside the band range", stacklevel=2)

    return IpDescriptors(
        crossover_hz=crossover,
        hfa_slope=float(-c1 * c2 * np.exp(-c2 * f_hi)),
        asymptote_level=float(c0),
        fit_params=(c0, c1, c2),
        crossover_raw_hz=_raw_crossover(f, y),
        tail_slope=tail_slope(curve),
        crossover_absent=absent,
        n_bands=int(f.size),
    )


def aggregate_descriptors(curves, mode="pooled"):
    """Descriptors of a set of curves.

    Parameters
    ----------
    curves : list of IpCurve
        Curves on one band grid.
    mode : str
        "pooled" fits the band-wise mean curve; "per-subject" fits every curve
        and averages the descriptors, ignoring curves whose fit fails and
        absent crossovers. Defaults to "pooled".

    Returns
    -------
    desc : IpDescriptors
    """

    curves = list(curves)
    if mode == "pooled":
        return descriptors(mean_curve(curves))
    if mode != "per-subject":
        raise ValueError(f"mode must be 'pooled' or 'per-subject', got '{mode}'")

    fitted = []
    for i, curve in enumerate(curves):
        try:
            fitted.append(descriptors(curve))
        except IpCurveError as err:
            warnings.warn(f"curve {i} skipped: {err}", stacklevel=2)
    if not fitted:
        raise IpCurveError("no curve produced descriptors", diagnostics={"n_curves": len(curves)})

    def mean_of(name):
        values = np.array([getattr(d, name) for d in fitted], dtype=float)
        values = values[np.isfinite(values)]
        return float(values.mean()) if values.size else float("nan")

    crossover = mean_of("crossover_hz")
    return IpDescriptors(
        crossover_hz=crossover,
        hfa_slope=mean_of("hfa_slope"),
        asymptote_level=mean_of("asymptote_level"),
        fit_params=tuple(np.mean([d.fit_params for d in fitted], axis=0)),
        crossover_raw_hz=mean_of("crossover_raw_hz"),
        tail_slope=mean_of("tail_slope"),
        crossover_absent=not np.isfinite(crossover),
        n_bands=min(d.n_bands for d in fitted),
    )
