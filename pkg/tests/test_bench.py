import numpy as np
import pytest

from psfcenter.bench import (DEFAULT_METHODS, Method, ScenarioConfig, compute_metrics, corrupt,
                             format_table, generate_scene, replicate_rng, run_monte_carlo,
                             scene_rng, write_replicates_csv)
from psfcenter.errors import InsufficientReplicates
from psfcenter.prox import LossKind

CENTER = np.array([1000.0, 1000.0, 5000.0])


def test_bead_below_center_points_up():
    cfg = ScenarioConfig(n=1, lateral_range=(1000.0, 1000.0), layer_depths=(50.0,))
    scene = generate_scene(cfg, scene_rng(0))
    np.testing.assert_allclose(scene.anchors, [[1000, 1000, 50]])
    np.testing.assert_allclose(scene.directions, [[0, 0, 1]])


def test_scene_lines_pass_through_center():
    cfg = ScenarioConfig()
    scene = generate_scene(cfg, scene_rng(3))
    assert len(scene) == 200
    assert np.max(scene.distances(CENTER)) < 1e-9
    np.testing.assert_array_equal(np.sort(np.unique(scene.anchors[:, 2])), [50, 250])
    assert np.sum(scene.anchors[:, 2] == 50) == 100
    assert np.all((scene.anchors[:, :2] >= 0) & (scene.anchors[:, :2] <= 2048))
    assert scene == generate_scene(cfg, scene_rng(3))


def test_layer_weights():
    cfg = ScenarioConfig(n=4000, layer_weights=(3.0, 1.0))
    z = generate_scene(cfg, scene_rng(0)).anchors[:, 2]
    assert np.mean(z == 50) == pytest.approx(0.75, abs=0.03)


@pytest.mark.parametrize("kwargs", [
    dict(sigma2=0.01), dict(sigma4=10.0), dict(outlier_probability=1.5), dict(n=0),
    dict(layer_weights=(1.0,)), dict(sigma1=-1.0),
])
def test_invalid_config(kwargs):
    with pytest.raises(ValueError):
        ScenarioConfig(**kwargs)


def test_zero_noise_is_identity():
    cfg = ScenarioConfig(sigma1=0, sigma2=0, sigma3=0, sigma4=0)
    scene = generate_scene(cfg, scene_rng(0))
    noisy = corrupt(scene, cfg, replicate_rng(0, 0))
    np.testing.assert_array_equal(noisy.anchors, scene.anchors)
    np.testing.assert_array_equal(noisy.directions, scene.directions)


def _outlier_mask(epsilon, n, seed=0):
    # inlier noise off: exactly the outliers move
    cfg = ScenarioConfig(n=n, outlier_probability=epsilon, sigma1=0.0, sigma2=1.0,
                         sigma3=0.0, sigma4=1.0)
    scene = generate_scene(cfg, scene_rng(seed))
    noisy = corrupt(scene, cfg, replicate_rng(seed, 0))
    moved_dir = np.any(noisy.directions != scene.directions, axis=1)
    moved_anchor = np.any(noisy.anchors != scene.anchors, axis=1)
    return moved_dir, moved_anchor


def test_outlier_fraction_law_of_large_numbers():
    moved_dir, moved_anchor = _outlier_mask(0.25, 100_000)
    assert moved_dir.mean() == pytest.approx(0.25, abs=0.005)
    np.testing.assert_array_equal(moved_dir, moved_anchor)


def test_outlier_boundaries():
    assert _outlier_mask(1.0, 1000)[0].all()
    assert not _outlier_mask(0.0, 1000)[0].any()


def test_raw_directions_kept_unless_renormalized():
    cfg = ScenarioConfig(n=20)
    scene = generate_scene(cfg, scene_rng(0))
    raw = corrupt(scene, cfg, replicate_rng(0, 0))
    assert not np.allclose(np.linalg.norm(raw.directions, axis=1), 1.0)
    cfg2 = ScenarioConfig(n=20, renormalize_directions=True)
    unit = corrupt(scene, cfg2, replicate_rng(0, 0))
    np.testing.assert_allclose(np.linalg.norm(unit.directions, axis=1), 1.0)
    np.testing.assert_allclose(unit.anchors, raw.anchors)


def test_metrics_examples():
    rep = compute_metrics([CENTER, CENTER], CENTER)
    assert rep.bias_percent == [0, 0, 0] and rep.sigma_percent == [0, 0, 0]
    assert rep.aggregate_error == 0

    rep = compute_metrics([CENTER + (10, 0, 0), CENTER - (10, 0, 0)], CENTER)
    np.testing.assert_allclose(rep.bias_percent, 0, atol=1e-12)
    assert rep.sigma_percent[0] == pytest.approx(np.sqrt(2) * 10 / 1000 * 100)
    assert rep.aggregate_error == pytest.approx(10)
    assert rep.mean_squared_error == pytest.approx(100)

    rep = compute_metrics([CENTER + (20, 0, 0)] * 5, CENTER)
    np.testing.assert_allclose(rep.bias_percent, [2, 0, 0])
    np.testing.assert_allclose(rep.sigma_percent, 0, atol=1e-12)
    assert rep.aggregate_error == pytest.approx(20)
    assert rep.rms_percent[0] == pytest.approx(2)


def test_metrics_need_two_estimates():
    with pytest.raises(InsufficientReplicates):
        compute_metrics([CENTER], CENTER)
    with pytest.raises(InsufficientReplicates):
        run_monte_carlo(ScenarioConfig(), [Method.parse("wls:1")], 1)


@pytest.mark.parametrize("text", ["wls:1", "tls:2", "pd:1:l1", "pd:2:huber:t=2.5"])
def test_method_round_trip(text):
    assert str(Method.parse(text)) == text


@pytest.mark.parametrize("text", ["wls:2", "pd:1", "tls:1:l1", "foo:1", "pd:3:l1", "pd:1:l7"])
def test_method_errors(text):
    with pytest.raises(ValueError):
        Method.parse(text)


def test_default_methods():
    names = [str(m) for m in DEFAULT_METHODS]
    assert len(names) == 8 and names[-2:] == ["tls:1", "tls:2"]
    assert {m.loss.kind for m in DEFAULT_METHODS if m.loss} == {
        LossKind.ABS, LossKind.BLOCK_NORM, LossKind.HUBER}


def test_zero_noise_reports_are_zero():
    cfg = ScenarioConfig(n=30, sigma1=0, sigma2=0, sigma3=0, sigma4=0)
    methods = [Method.parse(m) for m in ("wls:1", "tls:1", "tls:2", "pd:2:l1")]
    reports, _ = run_monte_carlo(cfg, methods, 3, threads=1)
    for rep in reports:
        np.testing.assert_allclose(rep.bias_percent, 0, atol=1e-7)
        np.testing.assert_allclose(rep.sigma_percent, 0, atol=1e-7)
        assert rep.aggregate_error < 1e-5


def test_monte_carlo_is_thread_independent():
    cfg = ScenarioConfig(n=40, seed=11)
    methods = [Method.parse(m) for m in ("tls:2", "pd:1:huber", "wls:1")]
    a, ra = run_monte_carlo(cfg, methods, 6, threads=1)
    b, rb = run_monte_carlo(cfg, methods, 6, threads=4)
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]
    for x, y in zip(ra, rb):
        for cx, cy in zip(x.centers, y.centers):
            np.testing.assert_array_equal(cx, cy)


def test_redraw_scene_changes_results():
    cfg = ScenarioConfig(n=40)
    m = [Method.parse("tls:1")]
    fixed, _ = run_monte_carlo(cfg, m, 4, threads=1)
    redrawn, _ = run_monte_carlo(cfg, m, 4, threads=1, redraw_scene=True)
    assert fixed[0].bias_percent != redrawn[0].bias_percent


def test_failures_mark_report_invalid():
    # one noiseless line leaves the normal matrix singular
    cfg = ScenarioConfig(n=1, sigma1=0, sigma2=0, sigma3=0, sigma4=0)
    reports, results = run_monte_carlo(cfg, [Method.parse("wls:1")], 4, threads=1)
    rep = reports[0]
    assert rep.failures == 4 and not rep.valid
    assert "SingularNormalMatrix" in rep.failure_messages[0]
    assert "invalid" in format_table(reports)


def test_bias_shrinks_with_replications():
    cfg = ScenarioConfig(seed=2)
    m = [Method.parse("tls:1")]
    small, _ = run_monte_carlo(cfg, m, 100, threads=1)
    large, _ = run_monte_carlo(cfg, m, 1000, threads=1)
    for j in range(3):
        bound = abs(small[0].bias_percent[j]) + 3 * small[0].sigma_percent[j] / np.sqrt(100)
        assert abs(large[0].bias_percent[j]) <= bound


def test_table_and_csv(tmp_path):
    cfg = ScenarioConfig(n=30)
    methods = [Method.parse("tls:2"), Method.parse("pd:1:l1")]
    reports, results = run_monte_carlo(cfg, methods, 3, threads=1)
    table = format_table(reports)
    lines = table.splitlines()
    assert "tls:2" in lines[0] and "pd:1:l1" in lines[0]
    for label in ("Bias (%)", "Sigma (%)", "RMS error", "MSE"):
        assert any(line.startswith(label) for line in lines)
    path = tmp_path / "reps.csv"
    write_replicates_csv(path, methods, results, cfg.center)
    rows = path.read_text().splitlines()
    assert rows[0] == "method,replicate,cx,cy,cz,error" and len(rows) == 1 + 6
