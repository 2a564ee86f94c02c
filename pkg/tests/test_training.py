import numpy as np
import pytest

from dcgmm import mixture as mx
from dcgmm import model as mg
from dcgmm import training as tr
from dcgmm.data import Dataset
from dcgmm.tensor import ConfigError, NumericalError

from _datasets import blob_mixture


def points_dataset(pts):
    return Dataset(pts.reshape(-1, 1, 1, pts.shape[1]),
                   np.zeros(len(pts), dtype=np.int64))


def snapshot(params):
    if isinstance(params, mx.CGMMParams):
        return [params.logits.copy(), params.mu.copy(), params.prec_raw.copy()]
    return [params.w.copy(), params.b.copy()]


def params_equal(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def test_activation_step_exact_tenths():
    assert tr.activation_step(0.1, 1800) == 180
    assert tr.activation_step(0.2, 1800) == 360
    assert tr.activation_step(0.3, 1800) == 540
    assert tr.activation_step(0.0, 1800) == 0
    assert tr.activation_step(0.25, 10) == 3  # ceil for fractional products


def test_schedule_default_delays():
    s = tr.TrainSchedule()
    assert s.delay(1) == pytest.approx(0.1)
    assert s.delay(3) == pytest.approx(0.3)
    s2 = tr.TrainSchedule(delays={2: 0.5})
    assert s2.delay(2) == 0.5 and s2.delay(1) == pytest.approx(0.1)
    with pytest.raises(ConfigError):
        tr.TrainSchedule(delays={1: 1.0})


def test_delayed_layer_stays_at_initialization():
    rng = np.random.default_rng(0)
    ds = Dataset(rng.random((40, 4, 4, 1)).astype(np.float32),
                 np.zeros(40, dtype=np.int64))
    cfg = mg.parse_config("G(3)-F(2,2)-G(2)", (4, 4, 1))
    model = mg.build_model(cfg, seed=1)
    before = snapshot(model.params[2])
    # total steps = 4; activation of layer 2 at ceil(0.9*4) = 4 -> never trains
    sch = tr.TrainSchedule(epochs=1, batch_size=10, delays={1: 0.0, 2: 0.9}, seed=2)
    _, lg = tr.train(model, ds, sch)
    assert params_equal(before, snapshot(model.params[2]))
    assert model.steps_seen[2] == 0
    assert model.steps_seen[0] == 4
    assert lg.activation_steps == {1: 0, 2: 4}


def test_zero_learning_rate_keeps_parameters_bitwise():
    rng = np.random.default_rng(1)
    ds = Dataset(rng.random((30, 2, 2, 1)).astype(np.float32),
                 np.zeros(30, dtype=np.int64))
    model = mg.build_model(mg.parse_config("G(4)", (2, 2, 1)), seed=3)
    before = snapshot(model.params[0])
    sch = tr.TrainSchedule(epochs=2, batch_size=10, lr_mu=0.0, lr_logits=0.0,
                           lr_prec=0.0, data_init=False, seed=4)
    tr.train(model, ds, sch)
    assert params_equal(before, snapshot(model.params[0]))


def test_layer_updates_do_not_cross_boundaries():
    rng = np.random.default_rng(2)
    ds = Dataset(rng.random((40, 4, 4, 1)).astype(np.float32),
                 rng.integers(0, 2, size=40))
    cfg = mg.parse_config("F(2,2)-G(3)-C(2)", (4, 4, 1))
    model = mg.build_model(cfg, seed=5)
    cls_before = snapshot(model.params[2])
    gmm_before = snapshot(model.params[1])
    # classifier frozen by zero lr; cGMM trains
    sch = tr.TrainSchedule(epochs=1, batch_size=10, lr_classifier=0.0,
                           classifier_delay=0.0, delays={1: 0.0}, seed=6)
    tr.train(model, ds, sch)
    assert not params_equal(gmm_before, snapshot(model.params[1]))
    assert params_equal(cls_before, snapshot(model.params[2]))

    # now the reverse: cGMM rates zero, classifier learns
    model2 = mg.build_model(cfg, seed=5)
    gmm_before2 = snapshot(model2.params[1])
    sch2 = tr.TrainSchedule(epochs=1, batch_size=10, lr_mu=0.0, lr_logits=0.0,
                            lr_prec=0.0, data_init=False, lr_classifier=0.1,
                            classifier_delay=0.0, seed=6)
    tr.train(model2, ds, sch2)
    assert params_equal(gmm_before2, snapshot(model2.params[1]))
    assert not params_equal(snapshot(model2.params[2]), cls_before)


def test_training_deterministic_under_seed():
    pts, _ = blob_mixture(500, 7, [[-0.4, 0.0], [0.4, 0.0]], sigma=0.08)
    ds = points_dataset(pts)
    runs = []
    for _ in range(2):
        model = mg.build_model(mg.parse_config("G(2)", (1, 1, 2)), seed=8)
        tr.train(model, ds, tr.TrainSchedule(epochs=3, batch_size=50, seed=9))
        runs.append(snapshot(model.params[0]))
    assert params_equal(*runs)


def test_two_component_mixture_recovery():
    centers = np.array([[-0.4, -0.2], [0.45, 0.3]])
    pts, _ = blob_mixture(4000, 11, centers, sigma=0.07)
    ds = points_dataset(pts)
    model = mg.build_model(mg.parse_config("G(2)", (1, 1, 2)), seed=12)
    tr.train(model, ds, tr.TrainSchedule(epochs=30, batch_size=100, seed=13))
    from dcgmm.evaluation import match_centroids
    assert match_centroids(model.params[0].mu, centers) <= 0.1


def test_evaluate_losses_single_gaussian_closed_form():
    rng = np.random.default_rng(14)
    pts = rng.normal(0.3, 0.5, size=(400, 1)).astype(np.float32)
    ds = points_dataset(pts)
    params = mx.CGMMParams(np.zeros(1), [[0.25]], mx.inv_softplus([[2.0]]))
    model = mg.build_model(mg.parse_config("G(1)", (1, 1, 1)), seed=0)
    model.params[0] = params
    got = tr.evaluate_losses(model, ds.images)[0]
    x = pts.astype(np.float64).ravel()
    want = np.mean(-0.5 * (2.0 * (x - 0.25) ** 2 - np.log(2.0) + np.log(2 * np.pi)))
    assert got == pytest.approx(want, rel=1e-6)


def test_evaluate_losses_duplication_invariance():
    rng = np.random.default_rng(15)
    imgs = rng.random((20, 2, 2, 1)).astype(np.float32)
    model = mg.build_model(mg.parse_config("G(3)", (2, 2, 1)), seed=16)
    a = tr.evaluate_losses(model, imgs)
    b = tr.evaluate_losses(model, np.concatenate([imgs, imgs]))
    assert a[0] == pytest.approx(b[0], rel=1e-12)


def test_holdout_records_cover_activation_and_end():
    rng = np.random.default_rng(17)
    ds = Dataset(rng.random((40, 2, 2, 1)).astype(np.float32),
                 np.zeros(40, dtype=np.int64))
    model = mg.build_model(mg.parse_config("G(2)-G(2)", (2, 2, 1)), seed=18)
    sch = tr.TrainSchedule(epochs=2, batch_size=10, seed=19)
    _, lg = tr.train(model, ds, sch, holdout=ds)
    steps = {s for s, _, _ in lg.holdout_records}
    assert lg.activation_steps[1] in steps and lg.activation_steps[2] in steps
    assert 0 in steps and lg.total_steps in steps
    assert lg.holdout_loss_at(2, lg.total_steps) == pytest.approx(
        tr.evaluate_losses(model, ds.images)[1], rel=1e-9)


def test_nonfinite_input_aborts_with_snapshot(tmp_path):
    imgs = np.zeros((10, 2, 2, 1), dtype=np.float32)
    ds = Dataset(imgs, np.zeros(10, dtype=np.int64))
    ds.images[0, 0, 0, 0] = np.nan  # poison after validation
    model = mg.build_model(mg.parse_config("G(2)", (2, 2, 1)), seed=20)
    snap = tmp_path / "abort.ckpt"
    with pytest.raises(NumericalError):
        tr.train(model, ds, tr.TrainSchedule(epochs=1, batch_size=10, seed=21),
                 snapshot_path=snap)
    assert snap.exists()
    assert mg.load(snap).config.text == "G(2)"


def test_trainlog_csv_format(tmp_path):
    rng = np.random.default_rng(22)
    ds = Dataset(rng.random((20, 2, 2, 1)).astype(np.float32),
                 np.zeros(20, dtype=np.int64))
    model = mg.build_model(mg.parse_config("G(2)", (2, 2, 1)), seed=23)
    _, lg = tr.train(model, ds, tr.TrainSchedule(epochs=1, batch_size=10, seed=24))
    path = tmp_path / "log.csv"
    lg.to_csv(path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "step,layer,loss"
    assert len(lines) == 1 + len(lg.train_records)
    step, layer, loss = lines[1].split(",")
    assert step == "0" and layer == "1"
    float(loss)


def test_seed_params_independent_mode():
    rng = np.random.default_rng(25)
    params = mx.init_cgmm_params(2, 3, rng, positions=(2, 2))
    x = rng.random((10, 2, 2, 3)).astype(np.float32)
    tr.seed_params_from_batch(params, x, rng)
    assert params.mu.shape == (2, 2, 2, 3)
    # each position's centroids moved into the data range
    assert np.all(params.mu > -0.05) and np.all(params.mu < 1.05)
    assert np.all(params.precision >= mx.PREC_MIN)


def test_seed_params_moment_matches_precisions():
    rng = np.random.default_rng(26)
    pts, _ = blob_mixture(400, 27, [[-0.5, 0.0], [0.5, 0.0]], sigma=0.05)
    params = mx.init_cgmm_params(2, 2, rng)
    tr.seed_params_from_batch(params, pts.reshape(-1, 1, 1, 2), rng)
    # precisions should be near 1/sigma^2 = 400 rather than the unit start
    assert np.all(params.precision > 50.0)
