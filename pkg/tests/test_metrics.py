import numpy as np
import pytest
from scipy import integrate, stats

import iplab as lab

PALETTE = {
    "target-welded": (0, 255, 0),
    "outside-weld": (255, 0, 0),
    "unfinished": (0, 0, 255),
    "workpiece-background": (128, 128, 128),
    "non-workpiece": (0, 0, 0),
}


def paint(counts, shape=(100, 100)):
    # Fill a mask row-major with the requested number of pixels per class
    pixels = []
    for cls, n in counts.items():
        pixels += [PALETTE[cls]] * n
    pixels += [PALETTE["non-workpiece"]] * (shape[0] * shape[1] - len(pixels))
    return np.array(pixels, dtype=np.uint8).reshape(shape + (3,))


def gaussian(n, cov, seed=0):
    return np.random.default_rng(seed).multivariate_normal([0.0, 0.0], cov, size=n).T


def test_ellipse_anisotropic_area():
    x, y = gaussian(100000, [[4.0, 0.0], [0.0, 1.0]])
    ellipse = lab.ellipse_95(x, y)

    assert ellipse.area == pytest.approx(np.pi * 5.9915 * 2, rel=0.03)
    assert ellipse.semi_major > ellipse.semi_minor
    assert abs(np.sin(ellipse.orientation)) < 0.05


def test_ellipse_isotropic_area():
    x, y = gaussian(100000, np.eye(2), seed=1)

    assert lab.ellipse_95(x, y).area == pytest.approx(18.82, rel=0.03)


def test_ellipse_coverage():
    x, y = gaussian(100000, [[2.0, 0.8], [0.8, 1.0]], seed=2)
    ellipse = lab.ellipse_95(x, y)

    assert np.mean(lab.points_inside(ellipse, x, y)) == pytest.approx(0.95, abs=0.005)


def test_ellipse_scaling():
    x, y = gaussian(5000, [[2.0, 0.3], [0.3, 1.0]], seed=3)

    base = lab.ellipse_95(x, y)
    doubled = lab.ellipse_95(2 * x, 2 * y)
    centimetres = lab.ellipse_95(x, y, scale=100.0)

    assert doubled.area == pytest.approx(4 * base.area, rel=1e-9)
    assert centimetres.area == pytest.approx(1e4 * base.area, rel=1e-9)


def test_ellipse_rotation_equivariance():
    x, y = gaussian(5000, [[3.0, 0.0], [0.0, 1.0]], seed=4)
    phi = 0.3
    c, s = np.cos(phi), np.sin(phi)

    base = lab.ellipse_95(x, y)
    rotated = lab.ellipse_95(c * x - s * y, s * x + c * y)

    turn = (rotated.orientation - base.orientation - phi + np.pi / 2) % np.pi - np.pi / 2
    assert rotated.area == pytest.approx(base.area, rel=1e-9)
    assert abs(turn) < 1e-9


def test_ellipse_rejects_degenerate_input():
    x = np.linspace(0, 1, 100)

    with pytest.raises(ValueError):
        lab.ellipse_95(x[:20], x[:20] ** 2)
    with pytest.raises(ValueError, match="singular"):
        lab.ellipse_95(x, 2 * x)


def test_anova_hand_fixture():
    result = lab.anova_oneway([[1, 2, 3], [2, 3, 4], [3, 4, 5]])
    oracle, _ = integrate.quad(lambda f: stats.f.pdf(f, 2, 6), 3.0, np.inf)

    assert abs(result.f_stat - 3.0) < 1e-12
    assert result.dof == (2, 6)
    assert abs(result.p_value - oracle) < 1e-3
    assert result.p_value == pytest.approx(0.125, abs=1e-9)
    assert not result.degenerate


def test_anova_identical_groups():
    result = lab.anova_oneway([[1.0, 2.0, 4.0]] * 3)

    assert result.f_stat == 0
    assert result.p_value == pytest.approx(1.0)


def test_anova_shift_invariance():
    rng = np.random.default_rng(5)
    groups = [rng.normal(loc, 1.0, 12) for loc in (0.0, 0.4, 1.0)]

    base = lab.anova_oneway(groups)
    shifted = lab.anova_oneway([g + 100.0 for g in groups])

    assert shifted.f_stat == pytest.approx(base.f_stat, rel=1e-9)
    assert shifted.p_value == pytest.approx(base.p_value, rel=1e-6)


def test_anova_degenerate_and_invalid():
    result = lab.anova_oneway([[1.0, 1.0], [2.0, 2.0]])

    assert result.degenerate
    assert result.p_value == 0
    with pytest.raises(ValueError):
        lab.anova_oneway([[1.0, 2.0]])
    with pytest.raises(ValueError):
        lab.anova_oneway([[1.0, 2.0], [3.0]])


def test_weld_score_fixture():
    mask = paint({"target-welded": 800, "unfinished": 200, "outside-weld": 100})
    score = lab.weld_score(mask, PALETTE)

    assert (score.a_t, score.a_o, score.a_u, score.a_wp) == (800, 100, 200, 1000)
    assert score.accuracy == pytest.approx(0.80)
    assert score.precision == pytest.approx(0.111, abs=1e-3)
    assert score.completion == 80.0
    assert sum(score.counts.values()) == 10000


def test_weld_score_precision_over_workpiece():
    mask = paint({"target-welded": 800, "unfinished": 200, "outside-weld": 100})

    assert lab.weld_score(mask, PALETTE, precision_denominator="workpiece").precision == pytest.approx(0.1)


def test_weld_score_complete_weld():
    score = lab.weld_score(paint({"target-welded": 1000}), PALETTE)

    assert score.accuracy == 1.0
    assert score.precision == 0.0
    assert score.completion == 100.0


def test_weld_score_nothing_welded():
    score = lab.weld_score(paint({"unfinished": 1000}), PALETTE)

    assert score.accuracy == 0.0
    assert score.completion == 0.0
    assert score.precision == 0.0
    assert not score.precision_defined


def test_weld_score_unknown_colour():
    mask = paint({"target-welded": 10})
    mask[0, 0] = (7, 7, 7)

    with pytest.raises(lab.PaletteError) as info:
        lab.weld_score(mask, PALETTE)
    assert info.value.colors == [[7, 7, 7]]
