import numpy as np
import pytest

from swavenet import data as D
from swavenet.errors import ConfigError, EmptyError, FormatError


def test_frame_signal_basic():
    frames = D.frame_signal(np.arange(1000.0), 200)
    assert frames.shape == (5, 200)


def test_frame_signal_short_input():
    with pytest.raises(EmptyError):
        D.frame_signal(np.arange(199.0), 200)


def test_frame_signal_reconstruction():
    samples = np.random.default_rng(0).normal(size=1037)
    frames = D.frame_signal(samples, 200)
    assert np.array_equal(frames.reshape(-1), samples[:1000])


def test_sequence_batch_validation():
    frames = np.ones((1, 4, 2))
    with pytest.raises(ConfigError):
        D.SequenceBatch(frames, [2])  # nonzero padding
    frames[0, 2:] = 0.0
    batch = D.SequenceBatch(frames, [2])
    assert batch.mask()[0].tolist() == [1.0, 1.0, 0.0, 0.0]
    with pytest.raises(ConfigError):
        D.SequenceBatch(frames, [5])


def test_segments_splitting():
    frames = np.arange(12.0).reshape(1, 12, 1)
    batch = D.SequenceBatch(frames, [12])
    segs = batch.segments(5)
    assert segs.batch_size == 2
    assert segs.frames[1, 0, 0] == 5.0
    with pytest.raises(ConfigError):
        batch.segments(13)


def test_bimodal_walk_deterministic():
    a = D.gen_bimodal_walk(10, 20, seed=42)
    b = D.gen_bimodal_walk(10, 20, seed=42)
    assert np.array_equal(a.frames, b.frames)
    assert not np.array_equal(a.frames, D.gen_bimodal_walk(10, 20, seed=43).frames)


def test_bimodal_walk_two_modes():
    batch = D.gen_bimodal_walk(2000, 51, seed=7)
    x = batch.frames[:, :, 0]
    deltas = np.diff(x, axis=1).reshape(-1)
    up = deltas[deltas > 0]
    down = deltas[deltas < 0]
    # Two tight clumps near +0.5 and -0.5 increments.
    assert abs(up.mean() - 0.5) < 0.02
    assert abs(down.mean() + 0.5) < 0.02
    assert up.std() < 0.2 and down.std() < 0.2
    # Persistence ~0.9: sign agreement between consecutive increments.
    signs = np.sign(np.diff(x, axis=1))
    agree = (signs[:, 1:] == signs[:, :-1]).mean()
    assert abs(agree - 0.9) < 0.02


def test_bimodal_exact_loglik_beats_unimodal_bound():
    batch = D.gen_bimodal_walk(400, 64, seed=3)
    exact = D.bimodal_exact_loglik(batch).mean()
    bound = D.bimodal_best_unimodal_ll(64)
    per_seq = D.bimodal_best_unimodal_ll_on(batch)
    bound_emp = per_seq.mean()
    assert exact > bound_emp
    # Empirical evaluation of the analytic predictor agrees with its
    # expectation within sampling error.
    se = per_seq.std(ddof=1) / np.sqrt(len(per_seq))
    assert abs(bound_emp - bound) < 4 * se


def test_stroke_toy_pen_channel_binary():
    batch = D.gen_stroke_toy(20, 60, seed=5)
    pen = batch.frames[:, :, 2]
    assert set(np.unique(pen)) <= {0.0, 1.0}
    assert np.array_equal(batch.frames, D.gen_stroke_toy(20, 60, seed=5).frames)


def test_stroke_toy_mean_stroke_length():
    # Long sequences keep boundary-censored strokes negligible.
    batch = D.gen_stroke_toy(40, 4000, seed=11)
    pen = batch.frames[:, :, 2]
    lengths = []
    for row in pen:
        run = 0
        for v in row:
            if v == 0.0:
                run += 1
            else:
                lengths.append(run)
                run = 0
    assert len(lengths) > 10000
    mean_len = np.mean(lengths)
    assert abs(mean_len - D.STROKE_MEAN_LEN) / D.STROKE_MEAN_LEN < 0.05


def test_swn_round_trip(tmp_path):
    batch = D.gen_bimodal_walk(7, 13, seed=1)
    path = tmp_path / "walk.swn"
    D.write_swn(path, batch)
    loaded = D.read_swn(path)
    assert np.array_equal(loaded.frames, batch.frames)
    assert loaded.lengths == batch.lengths


def test_swn_round_trip_variable_lengths(tmp_path):
    frames = np.zeros((2, 5, 2))
    frames[0, :5] = 1.25
    frames[1, :3] = -2.5
    batch = D.SequenceBatch(frames, [5, 3])
    path = tmp_path / "var.swn"
    D.write_swn(path, batch)
    loaded = D.read_swn(path)
    assert np.array_equal(loaded.frames, batch.frames)
    assert loaded.lengths == [5, 3]


def test_swn_bad_magic(tmp_path):
    path = tmp_path / "bad.swn"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FormatError) as err:
        D.read_swn(path)
    assert err.value.offset == 0


def test_swn_truncation_offset(tmp_path):
    batch = D.gen_bimodal_walk(2, 6, seed=2)
    path = tmp_path / "trunc.swn"
    D.write_swn(path, batch)
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(FormatError) as err:
        D.read_swn(path)
    assert err.value.offset is not None


def test_swn_empty_dataset(tmp_path):
    path = tmp_path / "empty.swn"
    D.write_swn(path, D.SequenceBatch(np.zeros((0, 0, 1)), []))
    loaded = D.read_swn(path)
    assert loaded.batch_size == 0


def test_normalize_round_trip():
    batch = D.gen_bimodal_walk(30, 16, seed=4)
    stats = D.compute_norm_stats(batch)
    normed = D.normalize(batch, stats)
    back = D.denormalize(normed, stats)
    assert np.max(np.abs(back.frames - batch.frames)) < 1e-12
    again = D.normalize(back, stats)
    assert np.max(np.abs(again.frames - normed.frames)) < 1e-12


def test_normalize_statistics():
    batch = D.gen_bimodal_walk(50, 32, seed=9)
    stats = D.compute_norm_stats(batch)
    normed = D.normalize(batch, stats)
    vals = normed.frames[:, :, 0].reshape(-1)
    assert abs(vals.mean()) < 1e-10
    assert abs(vals.std() - 1.0) < 1e-10


def test_normalize_constant_dimension_floored():
    frames = np.full((2, 3, 1), 4.0)
    batch = D.SequenceBatch(frames, [3, 3])
    stats = D.compute_norm_stats(batch)
    assert stats.std[0] == 1e-8
    normed = D.normalize(batch, stats)
    assert np.max(np.abs(normed.frames)) == 0.0


def test_normalize_excluded_pen_channel():
    batch = D.gen_stroke_toy(10, 40, seed=6)
    stats = D.compute_norm_stats(batch, exclude_dims=(2,))
    normed = D.normalize(batch, stats)
    assert np.array_equal(normed.frames[:, :, 2], batch.frames[:, :, 2])
