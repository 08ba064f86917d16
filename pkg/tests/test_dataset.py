import numpy as np
import pytest
from hypothesis import given, strategies as st

from koopman_transfer.dataset import (
    DatasetSpec,
    Normalizer,
    WindowSpec,
    fit_normalizer,
    generate_splits,
    load_dataset,
    load_normalizer,
    read_split_binary,
    save_dataset,
    sha256_file,
    split_seeds,
    stack_windows,
    window,
    window_starts,
)
from koopman_transfer.errors import DegenerateAxis, WindowTooLong


def test_default_spec_matches_full_scale_counts():
    spec = DatasetSpec()
    assert spec.split_shape("train") == (2048, 256)
    assert spec.split_shape("val") == (64, 1024)
    assert spec.split_shape("test") == (256, 1024)


def test_split_lengths(tiny_dataset):
    assert len(tiny_dataset.train) == 8
    assert all(t.states.shape == (257, 3) for t in tiny_dataset.train)
    assert all(t.states.shape == (321, 3) for t in tiny_dataset.test)
    assert all(np.all(np.isfinite(t.states)) for t in tiny_dataset.train)


def test_seeds_distinct_across_splits():
    spec = DatasetSpec(n_train=50, n_val=10, n_test=20)
    seeds = sum((split_seeds(spec, s) for s in ("train", "val", "test")), [])
    assert len(set(seeds)) == len(seeds)


def test_same_master_seed_same_bytes(tmp_path):
    spec = DatasetSpec(n_train=3, len_train=64, n_val=1, len_val=64, n_test=1, len_test=64, master_seed=3)
    for name in ("a", "b"):
        ds = generate_splits(spec)
        save_dataset(ds, tmp_path / name, fit_normalizer(ds.train))
    for f in ("train.csv", "val.csv", "test.csv", "train.bin", "manifest.txt"):
        assert sha256_file(tmp_path / "a" / f) == sha256_file(tmp_path / "b" / f)


def test_round_trip_is_bit_exact(tmp_path, tiny_dataset):
    norm = fit_normalizer(tiny_dataset.train)
    save_dataset(tiny_dataset, tmp_path, norm)
    back = load_dataset(tmp_path)
    for split in ("train", "val", "test"):
        for a, b in zip(tiny_dataset.split(split), back.split(split)):
            assert np.array_equal(a.states, b.states)
            assert a.seed == b.seed
        cached = read_split_binary(tmp_path / f"{split}.bin")
        assert np.array_equal(cached, tiny_dataset.states(split))
    n2 = load_normalizer(tmp_path)
    assert np.array_equal(n2.mean, norm.mean) and np.array_equal(n2.std, norm.std)


@pytest.mark.parametrize("steps,length,stride,count", [(256, 64, 16, 13), (256, 64, 64, 4), (100, 100, 7, 1)])
def test_window_counts(steps, length, stride, count):
    assert len(window_starts(steps, WindowSpec(length, stride))) == count


def test_window_too_long():
    with pytest.raises(WindowTooLong):
        window_starts(10, WindowSpec(11, 1))


def test_window_contents(tiny_dataset):
    t = tiny_dataset.train[0]
    ws = window(t, WindowSpec(64, 16))
    w = ws[2]
    assert w.start == 32
    assert np.array_equal(w.inputs, t.states[32:96])
    assert np.array_equal(w.targets, t.states[33:97])


@given(st.integers(1, 300), st.integers(1, 300), st.integers(1, 50))
def test_window_starts_progression(steps, length, stride):
    if length > steps:
        return
    starts = window_starts(steps, WindowSpec(length, stride))
    assert np.array_equal(starts, np.arange(len(starts)) * stride)
    assert starts[-1] + length <= steps
    assert starts[-1] + stride + length > steps


def test_stack_windows_never_cross_trajectories(tiny_dataset):
    blocks, ids, starts = stack_windows(tiny_dataset.train, WindowSpec(64, 16))
    assert blocks.shape == (8 * 13, 65, 3)
    for b, i, s in zip(blocks, ids, starts):
        assert np.array_equal(b, tiny_dataset.train[i].states[s : s + 65])


def test_normalizer_standardises(tiny_dataset):
    norm = fit_normalizer(tiny_dataset.train)
    z = norm.apply(np.concatenate([t.states for t in tiny_dataset.train]))
    assert np.abs(z.mean(axis=0)).max() < 1e-9
    assert np.abs(z.std(axis=0) - 1).max() < 1e-9
    s = tiny_dataset.val[0].states
    assert np.abs(norm.invert(norm.apply(s)) - s).max() < 1e-12


def test_disabled_normalizer_is_identity(tiny_dataset):
    s = tiny_dataset.val[0].states
    assert np.array_equal(Normalizer.identity().apply(s), s)


def test_degenerate_axis():
    from koopman_transfer.dataset import Trajectory

    flat = Trajectory(np.column_stack([np.arange(5.0), np.arange(5.0), np.ones(5)]), 0.01, 0, "train")
    with pytest.raises(DegenerateAxis):
        fit_normalizer([flat])
