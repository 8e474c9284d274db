"""History buffer, Adam, step mechanics, determinism, checkpoint resume."""

import hashlib
import math

import numpy as np
import pytest

from conftest import TINY_H, TINY_W, tiny_config
from semgan.data import generate_scene, default_domain_spec
from semgan.engine import Tensor
from semgan.losses import SoftnessParams
from semgan.networks import CheckpointError
from semgan.trainer import (
    HistoryBuffer,
    TrainConfig,
    TrainingDivergedError,
    ValidationError,
    adam_update,
    checkpoint_load,
    checkpoint_save,
    discriminator_update,
    generator_objective,
    generator_update,
    init_train_state,
    metric_row,
    parse_schedule,
    run_training,
    train_step,
)


def scene(seed, domain="virtual", h=TINY_H, w=TINY_W):
    return generate_scene(seed, default_domain_spec(domain), h, w)


def params_digest(net) -> str:
    digest = hashlib.sha256()
    for name, tensor in net.parameters().items():
        digest.update(name.encode())
        digest.update(tensor.data.tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# config and schedule


def test_parse_schedule_default():
    assert parse_schedule("1:1,0;4:0.9,0.1") == [(1, 1.0, 0.0), (4, 0.9, 0.1)]


def test_schedule_lookup():
    cfg = TrainConfig()
    assert cfg.alpha_beta_for_epoch(1) == (1.0, 0.0)
    assert cfg.alpha_beta_for_epoch(3) == (1.0, 0.0)
    assert cfg.alpha_beta_for_epoch(4) == (0.9, 0.1)
    assert cfg.alpha_beta_for_epoch(10) == (0.9, 0.1)


def test_validate_lists_every_violation():
    cfg = TrainConfig(lambda_c=-1, learning_rate=0, batch_size=2,
                      alpha_beta_schedule="1:0.5,0.2", image_height=30)
    problems = cfg.validate()
    text = "\n".join(problems)
    assert len(problems) >= 5
    assert "lambda_c" in text
    assert "alpha + beta" in text
    assert "learning_rate" in text
    assert "batch_size" in text
    assert "divisible" in text


def test_defaults_match_published_recipe():
    cfg = TrainConfig()
    assert cfg.lambda_c == 10.0
    assert cfg.lambda_g == 5.0
    assert cfg.learning_rate == 0.0002
    assert cfg.batch_size == 1
    assert cfg.validate() == []


# ---------------------------------------------------------------------------
# history buffer


def item(tag):
    return np.full((1, 1, 1, 1), float(tag), np.float32), \
        np.full((1, 1, 1, 1), float(tag), np.float32)


def test_history_capacity_zero_passthrough():
    buf = HistoryBuffer(0, np.random.default_rng(0))
    for tag in range(5):
        image, mask = buf.push_sample(*item(tag))
        assert image[0, 0, 0, 0] == tag
    assert buf.items == []


def test_history_empty_buffer_inserts_and_returns():
    buf = HistoryBuffer(4, np.random.default_rng(1))
    image, _ = buf.push_sample(*item(9))
    assert image[0, 0, 0, 0] == 9
    assert len(buf.items) == 1


def test_history_never_exceeds_capacity():
    buf = HistoryBuffer(2, np.random.default_rng(2))
    for tag in range(20):
        buf.push_sample(*item(tag))
        assert len(buf.items) <= 2


def test_history_scripted_rng_oracle():
    # Reference simulation of the documented protocol with the same draws.
    seed = 123
    buf = HistoryBuffer(2, np.random.default_rng(seed))
    ref_rng = np.random.default_rng(seed)
    stored = []
    expected = []
    for tag in range(10):
        if len(stored) < 2:
            stored.append(tag)
            expected.append(tag)
        elif ref_rng.random() < 0.5:
            index = int(ref_rng.integers(0, 2))
            expected.append(stored[index])
            stored[index] = tag
        else:
            expected.append(tag)
    actual = [int(buf.push_sample(*item(tag))[0][0, 0, 0, 0]) for tag in range(10)]
    assert actual == expected
    assert swap_happened(expected)


def swap_happened(sequence):
    return any(returned != pushed for pushed, returned in enumerate(sequence))


# ---------------------------------------------------------------------------
# adam


def one_param(value=1.0):
    p = Tensor(np.full((1, 1, 1, 1), value, np.float32), requires_grad=True)
    params = {"w": p}
    moments = {"w": [np.zeros((1, 1, 1, 1), np.float32),
                     np.zeros((1, 1, 1, 1), np.float32)]}
    return p, params, moments


def test_adam_zero_gradient_keeps_params():
    p, params, moments = one_param(2.5)
    grads = {"w": np.zeros((1, 1, 1, 1), np.float32)}
    adam_update(params, grads, moments, 0.01, 0.5, 0.999, 1e-8, step=1)
    assert p.data[0, 0, 0, 0] == 2.5


def test_adam_first_step_magnitude_is_lr():
    p, params, moments = one_param(1.0)
    grads = {"w": np.ones((1, 1, 1, 1), np.float32)}
    adam_update(params, grads, moments, 0.0002, 0.5, 0.999, 1e-8, step=1)
    # bias correction makes the first update m_hat / sqrt(v_hat) = 1
    assert p.data[0, 0, 0, 0] == pytest.approx(1.0 - 0.0002, abs=1e-9)


def test_adam_matches_scalar_reference_100_steps():
    rng = np.random.default_rng(5)
    p, params, moments = one_param(0.3)
    ref_p = np.float32(0.3)
    ref_m = np.float32(0.0)
    ref_v = np.float32(0.0)
    lr, b1, b2, eps = 0.01, 0.5, 0.999, 1e-8
    for step in range(1, 101):
        g = np.float32(rng.standard_normal())
        adam_update(params, {"w": np.full((1, 1, 1, 1), g, np.float32)},
                    moments, lr, b1, b2, eps, step=step)
        ref_m = np.float32(b1) * ref_m + np.float32(1 - b1) * g
        ref_v = np.float32(b2) * ref_v + np.float32(1 - b2) * (g * g)
        m_hat = ref_m / np.float32(1 - b1 ** step)
        v_hat = ref_v / np.float32(1 - b2 ** step)
        ref_p = ref_p - np.float32(lr) * (m_hat / (np.sqrt(v_hat) + np.float32(eps)))
        assert abs(float(p.data[0, 0, 0, 0]) - float(ref_p)) < 1e-6


def test_adam_rejects_non_finite_gradient():
    p, params, moments = one_param()
    grads = {"w": np.full((1, 1, 1, 1), np.nan, np.float32)}
    with pytest.raises(TrainingDivergedError, match="non-finite gradient"):
        adam_update(params, grads, moments, 0.01, 0.5, 0.999, 1e-8, step=1)


# ---------------------------------------------------------------------------
# train step


def test_train_step_deterministic(tmp_path):
    reports = []
    for _ in range(2):
        cfg = tiny_config(tmp_path)
        state = init_train_state(cfg)
        step_reports = []
        for i in range(3):
            step_reports.append(train_step(state, scene(i), scene(i, "real"), cfg))
        reports.append(step_reports)
    for a, b in zip(*reports):
        assert a == b  # bitwise-identical floats


def test_train_step_zero_weights_pure_adversarial(tmp_path):
    cfg = tiny_config(tmp_path, lambda_c=0.0, lambda_g=0.0)
    state = init_train_state(cfg)
    report = train_step(state, scene(0), scene(0, "real"), cfg)
    assert report.total == pytest.approx(report.adv_g_v2r + report.adv_g_r2v, abs=1e-7)


def test_generator_update_descends_at_small_lr(tmp_path):
    cfg = tiny_config(tmp_path, learning_rate=1e-5)
    state = init_train_state(cfg)
    v, r = scene(1), scene(1, "real")
    softness = SoftnessParams(*cfg.alpha_beta_for_epoch(1))
    before = generator_objective(state, v, r, softness)
    generator_update(state, v, r, softness)
    after = generator_objective(state, v, r, softness)
    assert after < before


def test_half_steps_do_not_cross_networks(tmp_path):
    cfg = tiny_config(tmp_path)
    state = init_train_state(cfg)
    v, r = scene(2), scene(2, "real")
    softness = SoftnessParams(*cfg.alpha_beta_for_epoch(1))

    d_before = (params_digest(state.d_r), params_digest(state.d_v))
    g_before = (params_digest(state.g_v2r), params_digest(state.g_r2v))
    _, fake_r, mask_v, fake_v, mask_r = generator_update(state, v, r, softness)
    assert (params_digest(state.d_r), params_digest(state.d_v)) == d_before
    assert (params_digest(state.g_v2r), params_digest(state.g_r2v)) != g_before

    g_mid = (params_digest(state.g_v2r), params_digest(state.g_r2v))
    discriminator_update(state, v, r, fake_r, mask_v, fake_v, mask_r, mask_v, mask_r)
    assert (params_digest(state.g_v2r), params_digest(state.g_r2v)) == g_mid
    assert (params_digest(state.d_r), params_digest(state.d_v)) != d_before


def test_train_step_aborts_on_non_finite(tmp_path):
    cfg = tiny_config(tmp_path)
    state = init_train_state(cfg)
    bad = scene(3)
    bad.image.data[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDivergedError):
        train_step(state, bad, scene(3, "real"), cfg)


def test_history_capacity_zero_trains(tmp_path):
    cfg = tiny_config(tmp_path, history_capacity=0)
    state = init_train_state(cfg)
    report = train_step(state, scene(4), scene(4, "real"), cfg)
    assert math.isfinite(report.total)
    assert state.history_r.items == []


# ---------------------------------------------------------------------------
# run_training


def test_run_training_zero_epochs(tmp_path, tiny_corpora):
    cfg = tiny_config(tmp_path, epochs=0)
    state = run_training(cfg, *tiny_corpora)
    assert state.step == 0
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert len(lines) == 1  # header only


def test_run_training_row_count_and_schedule(tmp_path, tiny_corpora):
    cfg = tiny_config(tmp_path, epochs=5, alpha_beta_schedule="1:1,0;4:0.9,0.1")
    state = run_training(cfg, *tiny_corpora)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0].split(",")[:2] == ["step", "adv_g_v2r"]
    rows = [line.split(",") for line in lines[1:]]
    assert len(rows) == 5 * 4  # epochs * min corpus size
    assert state.step == 20
    for row in rows:
        epoch, alpha, beta = int(row[8]), float(row[9]), float(row[10])
        if epoch <= 3:
            assert (alpha, beta) == (1.0, 0.0)
        else:
            assert (alpha, beta) == (0.9, 0.1)


def test_run_training_bitwise_repeatable(tmp_path, tiny_corpora):
    texts = []
    for run in ("a", "b"):
        out = tmp_path / run
        out.mkdir()
        cfg = tiny_config(out, epochs=2)
        run_training(cfg, *tiny_corpora)
        texts.append((out / "metrics.csv").read_text())
    assert texts[0] == texts[1]


def test_checkpoint_resume_matches_uninterrupted(tmp_path, tiny_corpora):
    full = tmp_path / "full"
    full.mkdir()
    cfg = tiny_config(full, epochs=3, checkpoint_interval=5)
    final_state = run_training(cfg, *tiny_corpora)
    assert final_state.step == 12
    full_lines = (full / "metrics.csv").read_text().splitlines()

    resumed = tmp_path / "resumed"
    resumed.mkdir()
    cfg2 = tiny_config(resumed, epochs=3, checkpoint_interval=5)
    state = run_training(cfg2, *tiny_corpora,
                         resume_from=full / "checkpoints" / "step_000005.ckpt")
    assert state.step == 12
    resumed_lines = (resumed / "metrics.csv").read_text().splitlines()
    assert resumed_lines[1:] == full_lines[6:]  # rows 6.. identical
    assert_checkpoints_equivalent(full / "checkpoints" / "final.ckpt",
                                  resumed / "checkpoints" / "final.ckpt")


def assert_checkpoints_equivalent(path_a, path_b):
    """Bitwise state equality; only the stored I/O paths may differ."""
    from semgan.networks import load_records
    from semgan.trainer import _record_to_json

    records_a = load_records(path_a)
    records_b = load_records(path_b)
    assert list(records_a) == list(records_b)
    for name in records_a:
        if name == "__manifest__":
            continue
        assert records_a[name].tobytes() == records_b[name].tobytes(), name
    manifest_a = _record_to_json(records_a["__manifest__"])
    manifest_b = _record_to_json(records_b["__manifest__"])
    for manifest in (manifest_a, manifest_b):
        manifest["config"].pop("metrics_path")
        manifest["config"].pop("checkpoint_dir")
    assert manifest_a == manifest_b


def test_checkpoint_save_load_save_identical(tmp_path, tiny_corpora):
    cfg = tiny_config(tmp_path, epochs=1)
    state = run_training(cfg, *tiny_corpora)
    first = tmp_path / "one.ckpt"
    second = tmp_path / "two.ckpt"
    checkpoint_save(first, state)
    reloaded = checkpoint_load(first)
    checkpoint_save(second, reloaded)
    assert first.read_bytes() == second.read_bytes()


def test_checkpoint_rejects_truncation(tmp_path, tiny_corpora):
    cfg = tiny_config(tmp_path, epochs=0)
    state = run_training(cfg, *tiny_corpora)
    path = tmp_path / "state.ckpt"
    checkpoint_save(path, state)
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(CheckpointError):
        checkpoint_load(path)


def test_run_training_rejects_bad_config(tmp_path, tiny_corpora):
    cfg = tiny_config(tmp_path, alpha_beta_schedule="1:0.8,0.1")
    with pytest.raises(ValidationError, match="alpha \\+ beta"):
        run_training(cfg, *tiny_corpora)


def test_run_training_rejects_dim_mismatch(tmp_path, tiny_corpora):
    cfg = tiny_config(tmp_path, image_height=32, image_width=32)
    with pytest.raises(ValidationError, match="config expects"):
        run_training(cfg, *tiny_corpora)


def test_metric_row_formatting():
    from semgan.losses import LossReport, LossWeights
    report = LossReport.from_components(0.5, 0.25, 0.125, 1.0, 0.1, 0.2,
                                        LossWeights(10.0, 5.0))
    row = metric_row(3, report, 1, 1.0, 0.0)
    fields = row.split(",")
    assert fields[0] == "3"
    assert fields[1] == "0.5"
    assert fields[8:] == ["1", "1.0", "0.0"]
