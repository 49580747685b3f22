import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from noisymix.errors import ContractError, ParameterError
from noisymix.robust import (KINDS, NOISE_KINDS, SEVERITY_TABLE, CorruptionSpec, aurra, corrupt, corrupt_batch,
                             evaluate, flip_probability, make_perturb_sequence, mean_flip_rate,
                             rms_calibration_error, robust_accuracy)
from noisymix.nn import MlpModel

GRAY = np.full((32, 32, 3), 0.5)


def brute_flips(preds, temporal):
    n = len(preds)
    count = 0
    for j in range(1, n):
        ref = preds[j - 1] if temporal else preds[0]
        count += preds[j] != ref
    return count / (n - 1)


# ---- corruptions ------------------------------------------------------------------------
@pytest.mark.parametrize("sev", [1, 2, 3, 4, 5])
def test_white_noise_std(sev):
    out = corrupt(GRAY, CorruptionSpec("white_noise", sev), np.random.default_rng(sev))
    sigma = SEVERITY_TABLE["white_noise"][sev - 1]
    assert abs((out - GRAY).std() / sigma - 1) < 0.10


@pytest.mark.parametrize("sev", [1, 2, 3, 4, 5])
def test_brightness_shift_is_exact(sev):
    out = corrupt(GRAY, CorruptionSpec("brightness", sev), np.random.default_rng(0))
    delta = SEVERITY_TABLE["brightness"][sev - 1]
    assert np.all(out == np.minimum(GRAY + delta, 1.0))
    assert out.mean() == pytest.approx(0.5 + delta, abs=1e-15)


def test_pixelate_is_idempotent():
    img = np.random.default_rng(0).random((32, 32, 3))
    spec = CorruptionSpec("pixelate", 5)
    once = corrupt(img, spec, np.random.default_rng(0))
    assert np.array_equal(corrupt(once, spec, np.random.default_rng(0)), once)


@pytest.mark.parametrize("kind", KINDS)
def test_severity_zero_is_identity(kind):
    img = np.random.default_rng(1).random((8, 8, 3))
    assert np.array_equal(corrupt(img, CorruptionSpec(kind, 0), np.random.default_rng(0)), img)


@pytest.mark.parametrize("kind", KINDS)
def test_corruptions_clamp_and_are_deterministic(kind):
    img = np.random.default_rng(2).random((16, 16, 3))
    a = corrupt(img, CorruptionSpec(kind, 5), np.random.default_rng(4))
    b = corrupt(img, CorruptionSpec(kind, 5), np.random.default_rng(4))
    assert np.array_equal(a, b)
    assert a.min() >= 0 and a.max() <= 1 and a.shape == img.shape


def test_spec_validation():
    for kind, sev in (("fog", 1), ("white_noise", 6), ("contrast", -1), ("contrast", 1.5)):
        with pytest.raises(ParameterError):
            CorruptionSpec(kind, sev)


def test_corrupt_batch_uses_per_image_streams():
    imgs = np.repeat(GRAY[None], 3, axis=0)
    out = corrupt_batch(imgs, CorruptionSpec("white_noise", 3), seed=5)
    assert not np.array_equal(out[0], out[1])
    assert np.array_equal(out, corrupt_batch(imgs, CorruptionSpec("white_noise", 3), seed=5))


# ---- robust accuracy ------------------------------------------------------------------------
def _specs():
    return [CorruptionSpec(k, s) for k in KINDS for s in (1, 3, 5)]


def test_oracle_model_scores_one():
    imgs = np.random.default_rng(0).random((6, 8, 8, 3))
    labels = np.arange(6) % 3

    def oracle(batch):
        return labels[: len(batch)]

    rep = robust_accuracy(oracle, imgs, labels, _specs())
    assert rep.clean_accuracy == 1.0
    assert all(a == 1.0 for _, _, a in rep.table)


def test_constant_model_scores_class_share():
    labels = np.arange(400) % 4
    imgs = np.zeros((400, 4, 4, 3))
    rep = robust_accuracy(lambda b: np.zeros(len(b), int), imgs, labels, _specs())
    assert rep.robust_accuracy == pytest.approx(0.25)


def test_mean_matches_emitted_csv():
    r = np.random.default_rng(3)
    m = MlpModel.init([4 * 4 * 3, 6, 3], r, "relu")
    imgs, labels = r.random((30, 4, 4, 3)), r.integers(0, 3, 30)
    rep = robust_accuracy(m, imgs, labels, _specs(), seed=1)
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert len(rows) == len(_specs())
    assert rep.robust_accuracy == pytest.approx(np.mean([float(x["accuracy"]) for x in rows]), abs=1e-15)


def test_severity_zero_robust_equals_clean():
    r = np.random.default_rng(4)
    m = MlpModel.init([4 * 4 * 3, 6, 3], r, "relu")
    imgs, labels = r.random((30, 4, 4, 3)), r.integers(0, 3, 30)
    rep = robust_accuracy(m, imgs, labels, [CorruptionSpec(k, 0) for k in KINDS])
    assert rep.robust_accuracy == rep.clean_accuracy


def test_threads_do_not_change_results():
    r = np.random.default_rng(5)
    m = MlpModel.init([4 * 4 * 3, 6, 3], r, "relu")
    imgs, labels = r.random((20, 4, 4, 3)), r.integers(0, 3, 20)
    a = robust_accuracy(m, imgs, labels, _specs(), seed=2).to_csv()
    b = robust_accuracy(m, imgs, labels, _specs(), seed=2, workers=3).to_csv()
    assert a == b


def test_empty_dataset():
    with pytest.raises(ContractError):
        robust_accuracy(lambda b: b, np.zeros((0, 4, 4, 3)), np.zeros(0), _specs())


# ---- sequences ----------------------------------------------------------------------------
def test_zero_amplitude_sequence_is_static():
    img = np.random.default_rng(0).random((8, 8, 3))
    for kind in ("gaussian_blur", "brightness", "rotate", "translate", "white_noise"):
        seq = make_perturb_sequence(img, kind, 10, np.random.default_rng(1), amplitude=0.0)
        assert all(np.array_equal(f, img) for f in seq.frames)
        preds = [int(f.sum() * 1000) % 7 for f in seq.frames]
        assert flip_probability(preds, seq.temporal) == 0.0


@pytest.mark.parametrize("kind", NOISE_KINDS)
def test_noise_sequences_are_not_temporal(kind):
    assert not make_perturb_sequence(GRAY, kind, 5, np.random.default_rng(0)).temporal


def test_brightness_ramp_is_exact():
    seq = make_perturb_sequence(np.full((4, 4, 3), 0.2), "brightness", 31, np.random.default_rng(0))
    for j, f in enumerate(seq.frames):
        assert f.mean() == pytest.approx(0.2 + 0.01 * j, abs=1e-15)
        assert np.all(f == f.flat[0])


def test_sequence_needs_two_frames():
    with pytest.raises(ContractError):
        make_perturb_sequence(GRAY, "rotate", 1)


# ---- flip probability / mFR ----------------------------------------------------------------
def test_flip_probability_examples():
    assert flip_probability([3, 3, 3, 3, 3]) == 0.0
    assert flip_probability([0, 1, 0, 1, 0, 1]) == 1.0
    assert flip_probability(["a", "a", "b", "a"]) == pytest.approx(2 / 3)
    assert flip_probability([0, 0, 1, 0], temporal=False) == pytest.approx(1 / 3)


def test_flip_probability_too_short():
    with pytest.raises(ContractError):
        flip_probability([1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=2, max_size=40), st.booleans(), st.permutations(range(5)))
def test_flip_probability_brute_force_and_relabeling(preds, temporal, perm):
    fp = flip_probability(preds, temporal)
    assert fp == brute_flips(preds, temporal)
    assert flip_probability([perm[p] for p in preds], temporal) == fp


def test_mean_flip_rate_examples():
    ref = {"a": 0.2, "b": 0.4, "c": 0.1}
    assert mean_flip_rate(ref, ref) == 1.0
    assert mean_flip_rate({k: v / 2 for k, v in ref.items()}, ref) == 0.5
    assert mean_flip_rate({"a": 0.1, "b": 0.4, "c": 0.15}, ref) == 1.0


def test_mean_flip_rate_errors():
    with pytest.raises(ContractError):
        mean_flip_rate({"a": 0.1}, {"a": 0.0})
    with pytest.raises(ContractError):
        mean_flip_rate({"a": 0.1}, {"b": 0.1})


# ---- calibration ----------------------------------------------------------------------------
def test_rms_examples():
    assert rms_calibration_error([1.0] * 4, [1] * 4) == 0.0
    assert rms_calibration_error([1.0] * 4, [0] * 4) == 1.0


def test_rms_two_bin_fixture():
    # bin 1: confidence 0.6, accuracy 0.6; bin 2: confidence 0.9, accuracy 0.5; equal mass
    conf = [0.6] * 10 + [0.9] * 10
    correct = [1] * 6 + [0] * 4 + [1] * 5 + [0] * 5
    assert rms_calibration_error(conf, correct, n_bins=2) == pytest.approx(np.sqrt(0.5 * 0.4 ** 2), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 9), min_size=1, max_size=10))
def test_rms_zero_when_calibrated(levels):
    # one bin per level c: ten predictions at confidence c/10, c of them correct
    conf, correct = [], []
    for c in sorted(set(levels)):
        conf += [c / 10] * 10
        correct += [1] * c + [0] * (10 - c)
    assert rms_calibration_error(conf, correct, n_bins=len(set(levels))) <= 1e-12


def test_aurra_examples():
    assert aurra([0.9, 0.5, 0.7], [1, 1, 1]) == 1.0
    assert aurra([0.9, 0.5, 0.7], [0, 0, 0]) == 0.0
    assert aurra([0.9, 0.4], [1, 0]) == pytest.approx(0.875, abs=1e-12)


def test_aurra_median_split_closed_form():
    # correct iff confidence above the median: acc_k = 1 for k <= N/2, else (N/2)/k
    n = 10
    conf = np.linspace(0.05, 0.95, n)
    correct = conf > np.median(conf)
    acc = np.array([1.0 if k <= n // 2 else (n // 2) / k for k in range(1, n + 1)])
    want = acc[0] / n + np.sum((acc[1:] + acc[:-1]) / 2) / n
    assert aurra(conf, correct) == pytest.approx(want, abs=1e-12)


def test_calibration_input_errors():
    with pytest.raises(ContractError):
        aurra([], [])
    with pytest.raises(ContractError):
        rms_calibration_error([1.2], [1])


# ---- full evaluation ----------------------------------------------------------------------------
def test_evaluate_report_ranges():
    r = np.random.default_rng(6)
    m = MlpModel.init([8 * 8 * 3, 6, 3], r, "relu")
    imgs, labels = r.random((12, 8, 8, 3)), r.integers(0, 3, 12)
    rep = evaluate(m, imgs, labels, _specs()[:4], seed=0, n_sequences=3, n_frames=6)
    d = rep.to_dict()
    assert 0 <= d["clean_accuracy"] <= 1 and 0 <= d["robust_accuracy"] <= 1
    assert all(0 <= v <= 1 for v in d["flip_probability"].values())
    assert 0 <= d["aurra"] <= 1 and 0 <= d["rms_calibration_error"] <= 1
    assert rep.to_json() == evaluate(m, imgs, labels, _specs()[:4], seed=0, n_sequences=3, n_frames=6).to_json()
