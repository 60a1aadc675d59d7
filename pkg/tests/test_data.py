import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from probmil import archive
from probmil.archive import BadMagicError, TruncatedError, VersionError, read_archive, write_archive
from probmil.data import (
    Bag,
    Dataset,
    SamplerState,
    SyntheticSpec,
    balanced_batches,
    class_centers,
    generate_synthetic,
    shuffled_batches,
    split,
)
from probmil.metrics import auc
from probmil.model import ConfigError
from probmil.tensor_core import Rng


def centroid_oracle_scores(ds, centers):
    # bag score for class k: max over instances of -||x - c_k||
    out = np.empty((len(ds), len(centers)))
    for i, bag in enumerate(ds.bags):
        x = bag.instances.astype(np.float64)
        dist = np.linalg.norm(x[:, None, :] - centers[None], axis=2)
        out[i] = (-dist).max(axis=0)
    return out


class TestSynthetic:
    def test_counts_and_contract(self):
        spec = SyntheticSpec(num_classes=2, feature_dim=5, bag_size=6, bags_per_class=10, seed=3)
        ds, sources = generate_synthetic(spec, return_sources=True)
        assert len(ds) == 20
        np.testing.assert_array_equal(ds.class_counts(), [10, 10])
        for bag, src in zip(ds.bags, sources):
            for k in range(2):
                n = int((src == k).sum())
                if bag.label[k]:
                    assert 1 <= n <= 2
                else:
                    assert n == 0

    def test_multi_label_contract(self):
        spec = SyntheticSpec(num_classes=4, feature_dim=3, bag_size=10, bags_per_class=30,
                             extra_label_prob=0.3, seed=1)
        ds, sources = generate_synthetic(spec, return_sources=True)
        assert (ds.labels.sum(axis=1) > 1).any()
        for bag, src in zip(ds.bags, sources):
            present = {int(s) for s in src if s >= 0}
            assert present == set(np.flatnonzero(bag.label))

    def test_deterministic(self):
        spec = SyntheticSpec(num_classes=3, bags_per_class=5, seed=11)
        assert generate_synthetic(spec) == generate_synthetic(spec)
        assert generate_synthetic(spec) != generate_synthetic(SyntheticSpec(num_classes=3, bags_per_class=5, seed=12))

    def test_infeasible(self):
        with pytest.raises(ConfigError):
            generate_synthetic(SyntheticSpec(bag_size=3, positives=(1, 4)))
        with pytest.raises(ConfigError):
            generate_synthetic(SyntheticSpec(positives=(0, 2)))

    def test_no_signal(self):
        spec = SyntheticSpec(num_classes=4, feature_dim=16, bags_per_class=250, separation=0.0, seed=2)
        ds = generate_synthetic(spec)
        centers = class_centers(SyntheticSpec(num_classes=4, feature_dim=16, separation=1.0, seed=2))
        scores = centroid_oracle_scores(ds, centers)
        aucs = [auc(scores[:, k], ds.labels[:, k]) for k in range(4)]
        assert 0.45 <= np.mean(aucs) <= 0.55

    def test_strong_signal_centroid_oracle(self):
        spec = SyntheticSpec(num_classes=10, feature_dim=16, bags_per_class=50,
                             separation=10.0, noise=1.0, seed=4)
        ds = generate_synthetic(spec)
        scores = centroid_oracle_scores(ds, class_centers(spec))
        aucs = [auc(scores[:, k], ds.labels[:, k]) for k in range(10)]
        assert min(aucs) > 0.95

    def test_float32_features(self):
        ds = generate_synthetic(SyntheticSpec(num_classes=2, bags_per_class=2))
        assert ds.bags[0].instances.dtype == np.float32


class TestSplit:
    def ds(self, n_per_class=10, K=4, seed=0):
        return generate_synthetic(SyntheticSpec(num_classes=K, feature_dim=2, bag_size=3,
                                                bags_per_class=n_per_class, seed=seed))

    def test_all_train(self):
        tr, ev = split(self.ds(), (1.0, 0.0))
        assert len(tr) == 40 and len(ev) == 0

    def test_sizes(self):
        tr, ev = split(self.ds(25), (0.8, 0.2), seed=1)
        assert (len(tr), len(ev)) == (80, 20)

    def test_deterministic_disjoint_covering(self):
        ds = self.ds(13)
        a = split(ds, (0.7, 0.3), seed=5)
        b = split(ds, (0.7, 0.3), seed=5)
        assert a[0] == b[0] and a[1] == b[1]
        ids_tr = {bag.id for bag in a[0].bags}
        ids_ev = {bag.id for bag in a[1].bags}
        assert not ids_tr & ids_ev
        assert ids_tr | ids_ev == {bag.id for bag in ds.bags}

    def test_stratified(self):
        counts = [2, 3, 50, 7]
        ds = generate_synthetic(SyntheticSpec(num_classes=4, feature_dim=2, bag_size=3,
                                              bags_per_class=counts, extra_label_prob=0.1, seed=3))
        for seed in range(5):
            tr, ev = split(ds, (0.9, 0.1), seed=seed)
            assert tr.class_counts().min() >= 1
            assert ev.class_counts().min() >= 1

    def test_single_bag_class_goes_to_train(self):
        ds = generate_synthetic(SyntheticSpec(num_classes=3, feature_dim=2, bag_size=3,
                                              bags_per_class=[1, 10, 10], seed=0))
        with pytest.warns(UserWarning, match="class 0"):
            tr, ev = split(ds, (0.5, 0.5))
        assert tr.class_counts()[0] == 1 and ev.class_counts()[0] == 0

    def test_bad_fractions(self):
        with pytest.raises(ConfigError):
            split(self.ds(), (0.5, 0.6))


def labels_from_sizes(sizes):
    N = sum(sizes)
    Y = np.zeros((N, len(sizes)), dtype=bool)
    start = 0
    for k, n in enumerate(sizes):
        Y[start:start + n, k] = True
        start += n
    return Y


class TestBalancedSampler:
    def test_skewed_counts(self):
        Y = labels_from_sizes([1000, 10])
        gen = balanced_batches(SamplerState.from_labels(Y, Rng(0)), 8)
        picks = np.concatenate([next(gen) for _ in range(100)])
        per_class = Y[picks].sum(axis=0)
        assert abs(per_class[0] - 400) <= 8 and abs(per_class[1] - 400) <= 8

    def test_single_class(self):
        Y = labels_from_sizes([7])
        gen = balanced_batches(SamplerState.from_labels(Y, Rng(0)), 5)
        for _ in range(10):
            assert all(Y[i, 0] for i in next(gen))

    def test_empty_class(self):
        Y = labels_from_sizes([3, 0, 2, 0])
        with pytest.raises(ConfigError, match=r"\[1, 3\]"):
            SamplerState.from_labels(Y, Rng(0))

    def test_multi_label_enrolment(self):
        Y = np.array([[1, 1], [1, 0], [0, 1]], dtype=bool)
        state = SamplerState.from_labels(Y, Rng(0))
        assert 0 in state.queues[0] and 0 in state.queues[1]

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.integers(1, 40), min_size=1, max_size=6), st.integers(1, 16), st.integers(0, 1000))
    def test_window_frequency_bound(self, sizes, B, seed):
        K = len(sizes)
        Y = labels_from_sizes(sizes)
        gen = balanced_batches(SamplerState.from_labels(Y, Rng(seed)), B)
        batches = [next(gen) for _ in range(3 * K * B)]
        for b in batches:
            assert all(0 <= i < len(Y) for i in b)
        window = K * B
        for start in range(0, len(batches) - window + 1, max(1, window // 3)):
            picks = np.concatenate(batches[start:start + window])
            # attribute each draw to the class queue it came from
            per_class = np.zeros(K, dtype=int)
            for i in picks:
                per_class[np.flatnonzero(Y[i])[0]] += 1
            assert per_class.max() - per_class.min() <= B

    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.integers(1, 30), min_size=1, max_size=5), st.integers(1, 12))
    def test_no_starvation(self, sizes, B):
        K = len(sizes)
        Y = labels_from_sizes(sizes)
        gen = balanced_batches(SamplerState.from_labels(Y, Rng(1)), B)
        limit = K * math.ceil(max(sizes) / (B / K))
        seen = set()
        for _ in range(limit):
            seen.update(next(gen))
        assert seen == set(range(len(Y)))

    def test_deterministic(self):
        Y = labels_from_sizes([5, 9, 2])
        a = balanced_batches(SamplerState.from_labels(Y, Rng(4)), 6)
        b = balanced_batches(SamplerState.from_labels(Y, Rng(4)), 6)
        assert [next(a) for _ in range(20)] == [next(b) for _ in range(20)]


class TestShuffledBatches:
    def test_epochs_cover_everything(self):
        gen = shuffled_batches(10, 5, Rng(0))
        first_epoch = next(gen) + next(gen)
        assert sorted(first_epoch) == list(range(10))

    def test_straddles_epochs(self):
        gen = shuffled_batches(7, 3, Rng(0))
        flat = sum((next(gen) for _ in range(7)), [])
        assert len(flat) == 21
        for e in range(3):
            assert sorted(flat[7 * e:7 * e + 7]) == list(range(7))

    def test_bad_args(self):
        with pytest.raises(ConfigError):
            next(shuffled_batches(0, 3, Rng(0)))


class TestArchive:
    def ds(self):
        return generate_synthetic(SyntheticSpec(num_classes=11, feature_dim=3, bag_size=4,
                                                bags_per_class=2, extra_label_prob=0.2, seed=7))

    def test_round_trip(self, tmp_path):
        ds = self.ds()
        write_archive(ds, tmp_path / "a.milb")
        assert read_archive(tmp_path / "a.milb") == ds

    def test_byte_identical(self, tmp_path):
        ds = self.ds()
        write_archive(ds, tmp_path / "a.milb")
        write_archive(ds, tmp_path / "b.milb")
        assert (tmp_path / "a.milb").read_bytes() == (tmp_path / "b.milb").read_bytes()

    def test_empty(self, tmp_path):
        ds = Dataset([], 5, 3)
        write_archive(ds, tmp_path / "e.milb")
        back = read_archive(tmp_path / "e.milb")
        assert len(back) == 0 and back.num_classes == 5 and back.feature_dim == 3

    def test_variable_bag_sizes_and_unicode_ids(self):
        bags = [Bag(np.ones((1, 2)), [1, 0, 1], "α"), Bag(np.arange(10).reshape(5, 2), [0, 0, 0], "bag two")]
        ds = Dataset(bags, 3, 2)
        assert archive.from_bytes(archive.to_bytes(ds)) == ds

    def test_layout(self):
        bag = Bag(np.array([[1.5, -2.0]]), [1, 0, 0, 0, 0, 0, 0, 0, 0, 1], "x")
        buf = archive.to_bytes(Dataset([bag], 10, 2))
        magic, version, K, M, N = struct.unpack_from("<4sIIIQ", buf)
        assert (magic, version, K, M, N) == (b"MILB", 1, 10, 2, 1)
        off = 24
        assert struct.unpack_from("<I", buf, off)[0] == 1 and buf[off + 4:off + 5] == b"x"
        off += 5
        assert struct.unpack_from("<I", buf, off)[0] == 1
        off += 4
        # class 0 -> bit 0 of byte 0; class 9 -> bit 1 of byte 1
        assert buf[off:off + 2] == bytes([0b00000001, 0b00000010])
        off += 2
        assert struct.unpack_from("<2f", buf, off) == (1.5, -2.0)
        off += 8
        assert struct.unpack_from("<Q", buf, off)[0] == 24
        assert struct.unpack_from("<Q", buf, off + 8)[0] == off

    def test_index_allows_random_access(self):
        ds = self.ds()
        buf = archive.to_bytes(ds)
        (index_at,) = struct.unpack_from("<Q", buf, len(buf) - 8)
        offsets = np.frombuffer(buf, "<u8", len(ds), index_at)
        n = 5
        (id_len,) = struct.unpack_from("<I", buf, int(offsets[n]))
        assert buf[int(offsets[n]) + 4:int(offsets[n]) + 4 + id_len].decode() == ds.bags[n].id

    @pytest.mark.parametrize("cut", [3, 10, 30, 100, -9, -1])
    def test_truncated(self, cut):
        buf = archive.to_bytes(self.ds())
        with pytest.raises(TruncatedError) as info:
            archive.from_bytes(buf[:cut])
        assert "offset" in str(info.value)
        assert 0 <= info.value.offset <= len(buf)

    def test_bad_magic(self):
        buf = archive.to_bytes(self.ds())
        with pytest.raises(BadMagicError, match="MILN is not MILB"):
            archive.from_bytes(b"MILN" + buf[4:])

    def test_version(self):
        buf = bytearray(archive.to_bytes(self.ds()))
        buf[4] = 2
        with pytest.raises(VersionError):
            archive.from_bytes(bytes(buf))

    def test_trailing_bytes(self):
        with pytest.raises(archive.ArchiveError):
            archive.from_bytes(archive.to_bytes(self.ds()) + b"\0")
