import json
import warnings

import numpy as np
import pytest

import iplab as lab
from iplab.interface import (
    IngestionError,
    cli,
    cmd_analyze,
    cmd_simulate,
    main,
    parse_forceplate_csv,
    parse_imu_csv,
    read_curve_csv,
    read_groups_csv,
    read_palette,
    read_ppm,
    read_trial_csv,
    run_config_from_dict,
    write_curve_csv,
    write_json,
    write_ppm,
    write_trial_csv,
)

FORCEPLATE_HEADER = "time_s,fx_n,fy_n,fz_n,copx_m,copy_m\n"
IMU_HEADER = "time_s,ax_mps2,ay_mps2,az_mps2\n"
PALETTE = {
    "target-welded": [0, 255, 0],
    "outside-weld": [255, 0, 0],
    "unfinished": [0, 0, 255],
    "workpiece-background": [128, 128, 128],
    "non-workpiece": [0, 0, 0],
}


def write_pivot_forceplate(path, height=0.9, n=3000, rate=100.0, seed=0):
    # Rigid pivot: every band gives the same IP height
    rng = np.random.default_rng(seed)
    t = np.arange(n) / rate
    copx = 0.005 * rng.normal(size=n)
    copy = 0.003 * rng.normal(size=n)
    fz = np.full(n, 666.4)
    fx = -fz * copx / height
    fy = np.zeros(n)
    rows = np.column_stack((t, fx, fy, fz, copx, copy))
    np.savetxt(path, rows, delimiter=",", header=FORCEPLATE_HEADER.strip(), comments="", fmt="%.17g")


def write_imu(path, n=3000, rate=100.0, seed=1):
    rng = np.random.default_rng(seed)
    t = np.arange(n) / rate
    rows = np.column_stack((t, rng.normal(size=(n, 2)), np.full(n, 9.8)))
    np.savetxt(path, rows, delimiter=",", header=IMU_HEADER.strip(), comments="", fmt="%.17g")


def weld_mask():
    pixels = (
        [PALETTE["target-welded"]] * 800
        + [PALETTE["unfinished"]] * 200
        + [PALETTE["outside-weld"]] * 100
        + [PALETTE["non-workpiece"]] * 8900
    )
    return np.array(pixels, dtype=np.uint8).reshape(100, 100, 3)


def run_cli(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# -----------------------------------------------------------------------------
# ingestion
# -----------------------------------------------------------------------------


def test_parse_forceplate_three_rows(tmp_path):
    path = tmp_path / "plate.csv"
    path.write_text(
        "# recorded on plate A\n"
        + FORCEPLATE_HEADER
        + "0.00,1.0,0.0,600.0,0.010,0.0\n"
        + "0.01,1.1,0.0,601.0,0.011,0.0\n"
        + "0.02,1.2,0.0,602.0,0.012,0.0\n"
    )

    record = parse_forceplate_csv(path)

    assert record.time.size == 3
    assert record.sample_rate == 100.0
    np.testing.assert_array_equal(record.fz, [600.0, 601.0, 602.0])


def test_parse_forceplate_rejects_negative_fz(tmp_path):
    path = tmp_path / "plate.csv"
    path.write_text(FORCEPLATE_HEADER + "0.00,1.0,0.0,600.0,0.01,0.0\n" + "0.01,1.0,0.0,-5,0.01,0.0\n")

    with pytest.raises(IngestionError) as info:
        parse_forceplate_csv(path)
    assert info.value.line == 3
    assert info.value.column == "fz_n"
    assert "fz_n" in str(info.value)


def test_parse_forceplate_reports_malformed_row(tmp_path):
    path = tmp_path / "plate.csv"
    path.write_text(FORCEPLATE_HEADER + "0.00,1.0,0.0,600.0,0.01,0.0\n" + "0.01,abc,0.0,600.0,0.01,0.0\n")

    with pytest.raises(IngestionError) as info:
        parse_forceplate_csv(path)
    assert info.value.line == 3
    assert info.value.column == "fx_n"


def test_parse_forceplate_sixty_seconds(tmp_path):
    path = tmp_path / "plate.csv"
    write_pivot_forceplate(path, n=6000)

    record = parse_forceplate_csv(path)

    assert record.duration == pytest.approx(60.0)
    assert not record.resampled


def test_parse_forceplate_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        parse_forceplate_csv(tmp_path / "absent.csv")


def test_parse_imu(tmp_path):
    path = tmp_path / "imu.csv"
    write_imu(path, n=500)

    record = parse_imu_csv(path)

    assert record.ax.size == 500
    assert record.sample_rate == 100.0


def test_parse_imu_missing_column(tmp_path):
    path = tmp_path / "imu.csv"
    path.write_text("time_s,ax_mps2,az_mps2\n0.0,0.1,9.8\n0.01,0.1,9.8\n")

    with pytest.raises(IngestionError) as info:
        parse_imu_csv(path)
    assert info.value.column == "ay_mps2"


def test_parse_imu_duplicate_timestamp(tmp_path):
    path = tmp_path / "imu.csv"
    path.write_text(IMU_HEADER + "0.00,0,0,9.8\n0.01,0,0,9.8\n0.01,0,0,9.8\n0.03,0,0,9.8\n")

    with pytest.raises(IngestionError) as info:
        parse_imu_csv(path)
    assert info.value.line == 4


def test_small_jitter_is_resampled(tmp_path):
    path = tmp_path / "imu.csv"
    t = np.arange(200) / 100.0
    t[50] += 0.00005
    rows = np.column_stack((t, np.zeros((200, 2)), np.full(200, 9.8)))
    np.savetxt(path, rows, delimiter=",", header=IMU_HEADER.strip(), comments="", fmt="%.17g")

    with pytest.warns(UserWarning, match="resampled"):
        record = parse_imu_csv(path)
    assert record.resampled
    np.testing.assert_allclose(np.diff(record.time), 0.01)


def test_large_jitter_is_rejected(tmp_path):
    path = tmp_path / "imu.csv"
    t = np.arange(200) / 100.0
    t[50] += 0.003
    rows = np.column_stack((t, np.zeros((200, 2)), np.full(200, 9.8)))
    np.savetxt(path, rows, delimiter=",", header=IMU_HEADER.strip(), comments="", fmt="%.17g")

    with pytest.raises(IngestionError, match="deviates"):
        parse_imu_csv(path)


def test_trial_file_round_trip(tmp_path):
    model = lab.tip_default()
    spec, sigma = lab.lqr_spec_from_preset("toi1", "stance")
    gain = lab.lqr_gain(lab.linearize(model), spec)
    series = lab.run_trial(model, gain, lab.NoiseSpec(sigma, base_seed=7), lab.SimConfig(duration=20.0), 0)

    write_trial_csv(tmp_path / "trial_000.csv", series)
    echo = read_trial_csv(tmp_path / "trial_000.csv")

    for name in ("time", "angles", "rates", "torques", "fx", "fz", "cop_x", "com_accel"):
        np.testing.assert_array_equal(getattr(echo, name), getattr(series, name))

    np.testing.assert_array_equal(lab.psd(echo.cop_x, 100.0).power, lab.psd(series.cop_x, 100.0).power)


def test_curve_file_round_trip(tmp_path):
    centers = lab.band_spec_default().centers
    height = 0.85 * (0.6 + 0.9 * np.exp(-0.8 * centers))
    height[3] = np.nan
    curve = lab.IpCurve(centers, height, 0.85, np.linspace(0.1, 0.9, 38))

    write_curve_csv(tmp_path / "curve.csv", curve)
    echo = read_curve_csv(tmp_path / "curve.csv")

    np.testing.assert_array_equal(echo.ip_height, curve.ip_height)
    np.testing.assert_array_equal(echo.reliable, curve.reliable)
    assert echo.reference_height == pytest.approx(0.85, rel=1e-12)


def test_read_groups_with_and_without_header(tmp_path):
    (tmp_path / "a.csv").write_text("value\n1\n2\n3\n")
    (tmp_path / "b.csv").write_text("2\n3\n4\n")

    groups = read_groups_csv([tmp_path / "a.csv", tmp_path / "b.csv"])

    np.testing.assert_array_equal(groups[0], [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(groups[1], [2.0, 3.0, 4.0])


def test_ppm_round_trip(tmp_path):
    write_ppm(tmp_path / "mask.ppm", weld_mask())

    np.testing.assert_array_equal(read_ppm(tmp_path / "mask.ppm"), weld_mask())


def test_truncated_ppm(tmp_path):
    (tmp_path / "mask.ppm").write_bytes(b"P6\n10 10\n255\n" + bytes(20))

    with pytest.raises(IngestionError, match="raster"):
        read_ppm(tmp_path / "mask.ppm")


def test_read_palette(tmp_path):
    write_json(tmp_path / "palette.json", PALETTE)

    assert read_palette(tmp_path / "palette.json")["outside-weld"] == (255, 0, 0)


# -----------------------------------------------------------------------------
# configuration
# -----------------------------------------------------------------------------


def test_run_config_defaults():
    config = run_config_from_dict({})

    assert config.gait is lab.Gait.STANCE
    assert config.lqr.alpha == 1e6
    assert config.reference_height == pytest.approx(0.85)
    assert config.bands.n_bands == 38
    assert config.to_dict()["controller"] == "toi1"


def test_run_config_kneeling_preset():
    config = run_config_from_dict({"model": "dip-default", "controller": "toi2", "seed": 3})

    assert config.lqr.alpha == lab.KNEELING_ALPHA
    assert config.lqr.beta == (0.1, 33.3)
    assert config.sigma == (1.0, 1.0)
    assert config.reference_height == 0.85
    assert config.noise.base_seed == 3


def test_run_config_inline_controller():
    doc = {"controller": {"alpha": 1e4, "beta": [1.0, 2.0, 3.0], "sigma": [0.5, 0.5, 0.5]}}
    config = run_config_from_dict(doc)

    assert config.lqr.beta == (1.0, 2.0, 3.0)
    assert run_config_from_dict(config.to_dict()).lqr.alpha == 1e4


def test_run_config_rejects_inconsistent_gait():
    with pytest.raises(ValueError):
        run_config_from_dict({"gait": "kneeling", "model": "tip-default"})
    with pytest.raises(ValueError):
        run_config_from_dict({"controller": {"alpha": 1.0, "beta": [1.0, 1.0, 1.0], "sigma": [1.0, 1.0]}})
    with pytest.raises(ValueError):
        run_config_from_dict({"sim": {"output_rate": 10.0}})


# -----------------------------------------------------------------------------
# commands
# -----------------------------------------------------------------------------


def test_simulate_is_deterministic(tmp_path):
    config = run_config_from_dict({"seed": 7, "sim": {"duration": 12.0, "dynamics": "linear"}})
    first = cmd_simulate(config, 2, tmp_path / "a", n_jobs=1)
    cmd_simulate(config, 2, tmp_path / "b", n_jobs=1)

    assert first["files"] == ["trial_000.csv", "trial_001.csv"]
    assert first["batch"]["n_completed"] == 2
    for name in first["files"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seeds"]["base_seed"] == 7


@pytest.mark.slow
def test_analyze_simulated_directory(tmp_path):
    config = run_config_from_dict({"seed": 7, "sim": {"duration": 30.0, "dynamics": "linear"}})
    cmd_simulate(config, 3, tmp_path / "sim", n_jobs=1)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = cmd_analyze(tmp_path / "sim", out_dir=tmp_path / "report")

    assert len(report["ip_curve"]["band_hz"]) == 38
    assert "crossover_hz" in report["descriptors"]
    assert report["descriptor_definition"] == lab.DESCRIPTOR_DEFINITION
    assert "accel_ellipse" not in report
    assert (tmp_path / "report" / "report.json").is_file()
    assert (tmp_path / "report" / "ip_curve.csv").is_file()


def test_analyze_forceplate_with_and_without_imu(tmp_path):
    write_pivot_forceplate(tmp_path / "plate.csv", height=0.9)
    write_imu(tmp_path / "imu.csv")

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        bare = cmd_analyze(tmp_path / "plate.csv")
        full = cmd_analyze(tmp_path / "plate.csv", imu=tmp_path / "imu.csv")

    np.testing.assert_allclose(
        [h for h in bare["ip_curve"]["ip_m"] if h is not None], 0.9, rtol=0.02
    )
    assert "accel_ellipse" not in bare
    assert full["accel_ellipse"]["units"] == "m/s^2"
    assert bare["sway_ellipse"]["units"] == "cm"
    for key in ("ip_curve", "descriptors", "psd", "sway_ellipse"):
        assert key in bare and key in full


def test_cli_missing_forceplate(tmp_path, capsys):
    code, out, err = run_cli(["analyze", "--forceplate", tmp_path / "absent.csv"], capsys)

    assert code == 2
    assert out == ""
    doc = json.loads(err.strip())
    assert doc["error"] == "input-missing"


def test_cli_usage_errors(capsys):
    code, _, err = run_cli(["simulate", "--trials", "2"], capsys)
    assert code == 64
    assert json.loads(err.strip())["error"] == "usage"

    code, _, _ = run_cli(["anova", "--groups", "a.csv", "--bogus"], capsys)
    assert code == 64


def test_cli_invalid_input(tmp_path, capsys):
    path = tmp_path / "plate.csv"
    path.write_text(FORCEPLATE_HEADER + "0.00,1.0,0.0,600.0,0.01,0.0\n" + "0.01,1.0,0.0,-5,0.01,0.0\n")

    code, _, err = run_cli(["analyze", "--forceplate", path], capsys)

    doc = json.loads(err.strip())
    assert code == 1
    assert doc["error"] == "invalid-input"
    assert doc["line"] == 3
    assert len(err.strip().splitlines()) == 1


@pytest.mark.parametrize(
    "doc",
    [
        {"model": {"gait": "stance"}},
        {"controller": {"alpha": 1e6}},
        {"controller": {"beta": [0.2, 0.1, 0.3]}},
        {"sim": {"duration": 5.0, "step_size": 0.01}},
        {"sim": [5.0]},
        [1, 2, 3],
    ],
    ids=["no-segments", "no-beta", "no-alpha", "unknown-sim-key", "sim-not-object", "not-object"],
)
def test_cli_truncated_config(tmp_path, capsys, doc):
    write_json(tmp_path / "run.json", doc)

    code, out, err = run_cli(["simulate", "--config", tmp_path / "run.json", "--seed", 1, "--out", tmp_path], capsys)

    assert code == 1
    assert out == ""
    assert len(err.strip().splitlines()) == 1
    assert json.loads(err.strip())["error"] == "invalid-input"


def test_cli_malformed_grid_and_manifest(tmp_path, capsys):
    write_json(tmp_path / "grid.json", [[1e6], [0.2]])
    argv = ["fit", "--target", tmp_path / "target.csv", "--grid", tmp_path / "grid.json", "--seed", 1]

    code, _, err = run_cli(argv, capsys)
    assert code == 1
    assert json.loads(err.strip())["error"] == "invalid-input"

    (tmp_path / "sim").mkdir()
    write_json(tmp_path / "sim" / "manifest.json", {"config": {}})
    code, _, err = run_cli(["analyze", "--forceplate", tmp_path / "sim"], capsys)
    assert code == 1
    assert "files" in json.loads(err.strip())["message"]


@pytest.mark.parametrize(
    ("config_dynamics", "flag", "expected"),
    [(None, None, "linear"), ("nonlinear", None, "nonlinear"), ("nonlinear", "linear", "linear")],
)
def test_cli_fit_dynamics_defaults_to_config(tmp_path, capsys, monkeypatch, config_dynamics, flag, expected):
    seen = []

    def record(config, *args, **kwargs):
        seen.append(config.sim.dynamics)
        return lab.FitResult(best_params={}, best_objective=0.0, cells=())

    monkeypatch.setattr(cli, "cmd_fit", record)
    write_json(tmp_path / "run.json", {} if config_dynamics is None else {"sim": {"dynamics": config_dynamics}})
    argv = ["fit", "--config", tmp_path / "run.json", "--target", tmp_path / "target.csv", "--seed", 1]
    if flag is not None:
        argv += ["--dynamics", flag]

    code, _, _ = run_cli(argv, capsys)

    assert code == 0
    assert seen == [expected]



def test_cli_weldscore(tmp_path, capsys):
    write_ppm(tmp_path / "mask.ppm", weld_mask())
    write_json(tmp_path / "palette.json", PALETTE)

    code, out, _ = run_cli(["weldscore", "--image", tmp_path / "mask.ppm", "--palette", tmp_path / "palette.json"], capsys)

    doc = json.loads(out)
    assert code == 0
    assert doc["accuracy"] == pytest.approx(0.8)
    assert doc["precision"] == pytest.approx(0.111, abs=1e-3)
    assert doc["completion"] == 80.0


def test_cli_anova(tmp_path, capsys):
    for name, values in (("a", "1\n2\n3\n"), ("b", "2\n3\n4\n"), ("c", "3\n4\n5\n")):
        (tmp_path / f"{name}.csv").write_text("value\n" + values)
    groups = ",".join(str(tmp_path / f"{name}.csv") for name in "abc")

    code, out, _ = run_cli(["anova", "--groups", groups], capsys)

    doc = json.loads(out)
    assert code == 0
    assert doc["f_stat"] == pytest.approx(3.0, abs=1e-12)
    assert doc["dof"] == [2, 6]


def test_cli_simulate(tmp_path, capsys):
    argv = ["simulate", "--preset", "tip-default", "--controller", "toi1", "--trials", 2, "--seed", 7]
    argv += ["--out", tmp_path / "sim", "--duration", 12, "--dynamics", "linear"]

    code, out, _ = run_cli(argv, capsys)

    assert code == 0
    assert json.loads(out)["n_trials"] == 2
    assert sorted(p.name for p in (tmp_path / "sim").iterdir()) == ["manifest.json", "trial_000.csv", "trial_001.csv"]


@pytest.mark.slow
def test_cli_fit_recovers_target(tmp_path, capsys):
    # The target comes from streams the search never sees.
    noise = lab.NoiseSpec((1.0, 1.0, 1.0), base_seed=1011)
    config = lab.SimConfig(dynamics="linear")
    trials = lab.run_batch(lab.tip_default(), lab.LqrSpec(1e6, (0.2, 0.1, 0.3)), noise, config, 10, silent=True)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        target = lab.mean_curve([lab.ip_curve(s.cop_x, s.grf, lab.band_spec_default(), 0.85) for s in trials])
    write_curve_csv(tmp_path / "target.csv", target)
    grid = lab.ParamGrid((1e6, 1e10), ((0.2,), (0.1,), (0.3, 33.3)), ((1.0,), (1.0,), (1.0,)))
    write_json(tmp_path / "grid.json", grid.to_dict())

    argv = ["fit", "--target", tmp_path / "target.csv", "--grid", tmp_path / "grid.json", "--trials", 10]
    argv += ["--seed", 11, "--out", tmp_path / "fit.json"]
    code, out, _ = run_cli(argv, capsys)

    doc = json.loads(out)
    assert code == 0
    assert doc["best_params"]["beta"] == [0.2, 0.1, 0.3]
    assert doc["best_objective"] > 0
    other_alpha = 1e10 if doc["best_params"]["alpha"] == 1e6 else 1e6
    assert [other_alpha, [0.2, 0.1, 0.3], [1.0, 1.0, 1.0]] in doc["ties"]
    landscape = json.loads((tmp_path / "fit.json").read_text())
    assert len(landscape["cells"]) == 4
    assert landscape["config"]["sim"]["dynamics"] == "linear"
