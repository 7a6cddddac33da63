from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats
from sklearn.decomposition import PCA

WELD_CLASSES = ("target-welded", "outside-weld", "unfinished", "workpiece-background", "non-workpiece")


class PaletteError(ValueError):
    """Image pixels whose colour is not in the palette."""

    def __init__(self, message, colors=()):
        super().__init__(message)
        self.colors = list(colors)


# -----------------------------------------------------------------------------
# Domain records
# -----------------------------------------------------------------------------


@dataclass(frozen=True)
class EllipseMetrics:
    """Confidence ellipse of a 2-D sample, in the units of the scaled input.

    `orientation` is the angle of the major axis to the x axis, in
    (-pi/2, pi/2].
    """

    area: float
    semi_major: float
    semi_minor: float
    orientation: float
    mean: tuple
    confidence: float = 0.95
    scale: float = 1.0

    def to_dict(self):
        return {
            "area": self.area,
            "semi_major": self.semi_major,
            "semi_minor": self.semi_minor,
            "orientation": self.orientation,
            "mean": list(self.mean),
            "confidence": self.confidence,
        }


@dataclass(frozen=True)
class AnovaResult:
    f_stat: float
    dof: tuple
    p_value: float
    group_means: tuple
    degenerate: bool = False

    def to_dict(self):
        return {
            "f_stat": None if not np.isfinite(self.f_stat) else self.f_stat,
            "dof": list(self.dof),
            "p_value": self.p_value,
            "group_means": list(self.group_means),
            "degenerate": self.degenerate,
        }


@dataclass(frozen=True)
class WeldScore:
    """Pixel counts and task scores of a classified welding image."""

    a_t: int
    a_o: int
    a_u: int
    a_wp: int
    accuracy: float
    precision: float
    completion: float
    precision_defined: bool = True
    precision_denominator: str = "welded"
    counts: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "a_t": self.a_t,
            "a_o": self.a_o,
            "a_u": self.a_u,
            "a_wp": self.a_wp,
            "accuracy": self.accuracy,
            "precision": self.precision,
            "precision_defined": self.precision_defined,
            "precision_denominator": self.precision_denominator,
            "completion": self.completion,
            "counts": dict(self.counts),
        }


# -----------------------------------------------------------------------------
# ellipse_95
# -----------------------------------------------------------------------------


def ellipse_95(x, y, confidence=0.95, scale=1.0):
    """Covariance confidence ellipse of paired samples.

    The principal axes come from a PCA of the centred samples; the semi-axes
    are sqrt(chi2_2(confidence) * lambda_i) with lambda_i the sample covariance
    eigenvalues, so that area = pi chi2_2(confidence) sqrt(det(cov)).

    Parameters
    ----------
    x : numpy.ndarray
        First coordinate of the samples (A-P COP or acceleration).
    y : numpy.ndarray
        Second coordinate, same length.
    confidence : float
        Probability mass of the ellipse. Defaults to 0.95.
    scale : float
        Factor applied to both coordinates before fitting, e.g. 100 to report
        metres in centimetres. Defaults to 1.0.

    Returns
    -------
    ellipse : EllipseMetrics
        Area, semi-axes, orientation and centre.
    """

    x = np.asarray(x, dtype=float) * scale
    y = np.asarray(y, dtype=float) * scale
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"x {x.shape} and y {y.shape} must be 1-D and of equal length")
    if x.size < 30:
        raise ValueError(f"ellipse needs at least 30 paired samples, got {x.size}")
    if not 0 < confidence < 1:
        raise ValueError(f"confidence must lie in (0, 1), got {confidence}")

    points = np.column_stack((x, y))
    pca = PCA(n_components=2).fit(points)
    major_var, minor_var = pca.explained_variance_
    if not minor_var > 1e-12 * max(major_var, np.finfo(float).tiny):
        raise ValueError("sample covariance is singular, the ellipse is degenerate")

    chi2 = stats.chi2.ppf(confidence, df=2)
    semi_major = float(np.sqrt(chi2 * major_var))
    semi_minor = float(np.sqrt(chi2 * minor_var))

    axis = pca.components_[0]
    orientation = float(np.arctan2(axis[1], axis[0]))
    if orientation <= -np.pi / 2:
        orientation += np.pi
    elif orientation > np.pi / 2:
        orientation -= np.pi

    return EllipseMetrics(
        area=float(np.pi * semi_major * semi_minor),
        semi_major=semi_major,
        semi_minor=semi_minor,
        orientation=orientation,
        mean=tuple(float(v) for v in pca.mean_),
        confidence=confidence,
        scale=scale,
    )


def points_inside(ellipse, x, y):
    """Boolean mask of the samples lying inside `ellipse` (same units as its input)."""
    dx = np.asarray(x, dtype=float) * ellipse.scale - ellipse.mean[0]
    dy = np.asarray(y, dtype=float) * ellipse.scale - ellipse.mean[1]
    c, s = np.cos(ellipse.orientation), np.sin(ellipse.orientation)
    u = (c * dx + s * dy) / ellipse.semi_major
    v = (-s * dx + c * dy) / ellipse.semi_minor
    return u * u + v * v <= 1.0


# -----------------------------------------------------------------------------
# anova_oneway
# -----------------------------------------------------------------------------


def anova_oneway(groups):
    """One-way analysis of variance.

    Parameters
    ----------
    groups : list of array_like
        At least two groups of at least two samples.

    Returns
    -------
    result : AnovaResult
        F = MS_between / MS_within with its degrees of freedom and the upper
        tail probability of the F distribution. When the within-group variance
        is zero, F is infinite and p is 0 for unequal means (F = 0, p = 1 for
        equal ones) and `degenerate` is set.
    """

    groups = [np.asarray(g, dtype=float).ravel() for g in groups]
    if len(groups) < 2:
        raise ValueError(f"ANOVA needs at least 2 groups, got {len(groups)}")
    for i, g in enumerate(groups):
        if g.size < 2:
            raise ValueError(f"group {i} has {g.size} samples, at least 2 are needed")
        if not np.all(np.isfinite(g)):
            raise ValueError(f"group {i} contains non-finite values")

    k = len(groups)
    n = sum(g.size for g in groups)
    means = np.array([g.mean() for g in groups])
    grand = np.concatenate(groups).mean()
    ss_between = float(sum(g.size * (m - grand) ** 2 for g, m in zip(groups, means)))
    ss_within = float(sum(((g - m) ** 2).sum() for g, m in zip(groups, means)))
    d1, d2 = k - 1, n - k

    if ss_within == 0:
        if ss_between == 0 or np.ptp(means) == 0:
            return AnovaResult(0.0, (d1, d2), 1.0, tuple(means.tolist()), degenerate=True)
        return AnovaResult(float("inf"), (d1, d2), 0.0, tuple(means.tolist()), degenerate=True)

    f_stat = (ss_between / d1) / (ss_within / d2)
    # Upper tail of F(d1, d2) through the regularized incomplete beta function.
    p_value = float(special.betainc(d2 / 2, d1 / 2, d2 / (d2 + d1 * f_stat)))
    return AnovaResult(float(f_stat), (d1, d2), float(np.clip(p_value, 0.0, 1.0)), tuple(means.tolist()))


# -----------------------------------------------------------------------------
# weld_score
# -----------------------------------------------------------------------------


def _pack_rgb(rgb):
    rgb = np.asarray(rgb, dtype=np.int64)
    return (rgb[..., 0] << 16) | (rgb[..., 1] << 8) | rgb[..., 2]


def weld_score(mask, palette, precision_denominator="welded"):
    """Accuracy, precision and completion of a classified welding image.

    Parameters
    ----------
    mask : numpy.ndarray
        H x W x 3 RGB image where every pixel carries one class colour.
    palette : dict
        Maps each of WELD_CLASSES to its (r, g, b) colour.
    precision_denominator : str
        "welded" divides the outside-weld count by all welded pixels
        (A_t + A_o); "workpiece" divides by A_wp. Defaults to "welded".

    Returns
    -------
    score : WeldScore
        accuracy = A_t / A_wp, completion = 100 (A_wp - A_u) / A_wp, with A_wp
        the workpiece region (target-welded, unfinished and untouched
        workpiece pixels). With nothing welded the precision is 0 and
        `precision_defined` is False.
    """

    mask = np.asarray(mask)
    if mask.ndim != 3 or mask.shape[2] != 3:
        raise ValueError(f"mask must be an H x W x 3 RGB image, got shape {mask.shape}")
    if precision_denominator not in ("welded", "workpiece"):
        raise ValueError(f"precision_denominator must be 'welded' or 'workpiece', got '{precision_denominator}'")
    missing = [c for c in WELD_CLASSES if c not in palette]
    if missing:
        raise ValueError(f"palette lacks colours for {missing}")

    codes = {cls: int(_pack_rgb(palette[cls])) for cls in WELD_CLASSES}
    if len(set(codes.values())) != len(codes):
        raise ValueError("palette assigns one colour to several classes")

    values, counts = np.unique(_pack_rgb(mask).ravel(), return_counts=True)
    known = np.isin(values, list(codes.values()))
    if not np.all(known):
        offending = [[(v >> 16) & 255, (v >> 8) & 255, v & 255] for v in values[~known].tolist()]
        raise PaletteError(f"pixels with colours outside the palette: {offending}", colors=offending)

    lookup = dict(zip(values.tolist(), counts.tolist()))
    count = {cls: int(lookup.get(code, 0)) for cls, code in codes.items()}

    a_t = count["target-welded"]
    a_o = count["outside-weld"]
    a_u = count["unfinished"]
    a_wp = a_t + a_u + count["workpiece-background"]
    if a_wp == 0:
        raise ValueError("image contains no workpiece pixels")

    welded = a_t + a_o
    denominator = welded if precision_denominator == "welded" else a_wp
    defined = welded > 0
    precision = a_o / denominator if defined else 0.0

    return WeldScore(
        a_t=a_t,
        a_o=a_o,
        a_u=a_u,
        a_wp=a_wp,
        accuracy=a_t / a_wp,
        precision=precision,
        completion=100 * (a_wp - a_u) / a_wp,
        precision_defined=defined,
        precision_denominator=precision_denominator,
        counts=count,
    )
