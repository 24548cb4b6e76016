"""Dataset formats, synthetic generation, stratified oracle split."""

import json
import math
import struct

import numpy as np
import pytest

from cepc import data
from cepc.errors import DataError, FormatError
from cepc.metrics import f1_metrics
from cepc.rng import RngStream


def tiny_dataset(n=6, dim=3, name="toy", labeled=True, seed=5):
    gen = RngStream(seed, "tiny").generator()
    feats = gen.normal(size=(n, dim)).astype(np.float32)
    labels = (
        np.array([i % 2 for i in range(n)], dtype=np.int8)
        if labeled
        else np.full(n, -1, dtype=np.int8)
    )
    return data.DomainDataset(
        name=name,
        role="source" if labeled else "target",
        ids=[f"{name}-{i:05d}" for i in range(n)],
        labels=labels,
        features=feats,
    )


def logistic_probe(x, y, epochs=300, lr=0.5):
    """Independent linear classifier used as a separability oracle."""
    w = np.zeros(x.shape[1])
    b = 0.0
    for _ in range(epochs):
        p = 1.0 / (1.0 + np.exp(-(x @ w + b)))
        g = p - y
        w -= lr * (x.T @ g) / len(y)
        b -= lr * g.mean()
    return lambda m: (1.0 / (1.0 + np.exp(-(m @ w + b))) > 0.5).astype(int)


class TestJsonl:
    def test_round_trip(self, tmp_path):
        ds = tiny_dataset()
        path = tmp_path / "toy.jsonl"
        data.save_jsonl(ds, path)
        back = data.load_jsonl(path)
        assert back.name == "toy"
        assert back.role == "source"
        assert back.ids == ds.ids
        assert np.array_equal(back.labels, ds.labels)
        assert np.array_equal(back.features, ds.features)
        # second round trip is byte-stable
        path2 = tmp_path / "again.jsonl"
        data.save_jsonl(back, path2)
        back2 = data.load_jsonl(path2, name="toy")
        assert np.array_equal(back2.features, ds.features)

    def test_null_labels_mean_target(self, tmp_path):
        path = tmp_path / "t.jsonl"
        rows = [
            {"id": "a", "label": None, "features": [0.0, 1.0]},
            {"id": "b", "label": None, "features": [2.0, 3.0]},
        ]
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        ds = data.load_jsonl(path)
        assert ds.role == "target"
        assert np.array_equal(ds.labels, [-1, -1])

    def test_mixed_labels_rejected(self, tmp_path):
        path = tmp_path / "m.jsonl"
        rows = [
            {"id": "a", "label": 1, "features": [0.0]},
            {"id": "b", "label": None, "features": [1.0]},
        ]
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        with pytest.raises(DataError):
            data.load_jsonl(path)

    def test_dim_mismatch_names_line(self, tmp_path):
        path = tmp_path / "d.jsonl"
        rows = [
            {"id": "a", "label": 0, "features": [0.0, 1.0]},
            {"id": "b", "label": 1, "features": [1.0]},
        ]
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        with pytest.raises(DataError, match="line 2"):
            data.load_jsonl(path)

    def test_duplicate_ids_rejected(self, tmp_path):
        path = tmp_path / "dup.jsonl"
        rows = [
            {"id": "a", "label": 0, "features": [0.0]},
            {"id": "a", "label": 1, "features": [1.0]},
        ]
        path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        with pytest.raises(DataError):
            data.load_jsonl(path)


class TestBinary:
    def test_round_trip_bit_exact(self, tmp_path):
        ds = tiny_dataset(n=9, dim=4)
        path = tmp_path / "toy.bin"
        data.save_binary(ds, path)
        back = data.load_binary(path, name="toy")
        assert back.ids == ds.ids
        assert np.array_equal(back.labels, ds.labels)
        assert back.features.tobytes() == ds.features.tobytes()

    def test_golden_header(self, tmp_path):
        gen = RngStream(8, "golden").generator()
        ds = data.DomainDataset(
            name="g",
            role="target",
            ids=[f"g-{i}" for i in range(1000)],
            labels=np.full(1000, -1, dtype=np.int8),
            features=gen.normal(size=(1000, 32)).astype(np.float32),
        )
        path = tmp_path / "g.bin"
        data.save_binary(ds, path)
        raw = path.read_bytes()
        assert raw[0:4] == b"CEPC"
        assert struct.unpack("<H", raw[4:6])[0] == 1
        assert struct.unpack("<I", raw[6:10])[0] == 1000
        assert struct.unpack("<I", raw[10:14])[0] == 32
        # first feature row stored little-endian row-major right after header
        row = np.frombuffer(raw[14 : 14 + 32 * 4], dtype="<f4")
        np.testing.assert_array_equal(row, ds.features[0])

    def test_truncated_rejected(self, tmp_path):
        ds = tiny_dataset()
        path = tmp_path / "t.bin"
        data.save_binary(ds, path)
        raw = path.read_bytes()
        (tmp_path / "cut.bin").write_bytes(raw[: len(raw) - 7])
        with pytest.raises(FormatError):
            data.load_binary(tmp_path / "cut.bin")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(FormatError):
            data.load_binary(tmp_path / "bad.bin")

    def test_load_dataset_sniffs_format(self, tmp_path):
        ds = tiny_dataset()
        data.save_binary(ds, tmp_path / "a.bin")
        data.save_jsonl(ds, tmp_path / "a.jsonl")
        for p in ("a.bin", "a.jsonl"):
            back = data.load_dataset(tmp_path / p)
            assert np.array_equal(back.features, ds.features)


class TestSynthetic:
    def test_deterministic(self):
        spec = data.SynthSpec(n_domains=2, docs_per_domain=40, dim=4, seed=3)
        a = data.gen_synthetic(spec)
        b = data.gen_synthetic(spec)
        assert len(a) == 3  # two sources plus a target domain
        for da, db in zip(a, b):
            assert da.ids == db.ids
            assert np.array_equal(da.features, db.features)
            assert np.array_equal(da.labels, db.labels)

    def test_exact_positive_counts(self):
        spec = data.SynthSpec(
            n_domains=2, docs_per_domain=53, dim=3, positive_rate=0.2, seed=1
        )
        for ds in data.gen_synthetic(spec):
            assert int((ds.labels == 1).sum()) == math.floor(53 * 0.2)

    def test_identical_profile_domains_are_separable_across(self):
        # zero shift and rotation: a probe trained on one domain transfers
        spec = data.SynthSpec(
            n_domains=1,
            docs_per_domain=400,
            dim=4,
            positive_rate=0.2,
            shift_magnitude=0.0,
            rotation_angle=0.0,
            shift_profile=(0.0, 0.0),
            seed=11,
        )
        train, test = data.gen_synthetic(spec)
        predict = logistic_probe(
            train.features.astype(np.float64), train.labels.astype(np.float64)
        )
        f1, _, _ = f1_metrics(test.labels, predict(test.features.astype(np.float64)))
        assert f1 >= 0.95

    def test_adversarial_swaps_class_means(self):
        spec = data.SynthSpec(
            n_domains=2,
            docs_per_domain=500,
            dim=3,
            shift_magnitude=0.0,
            rotation_angle=0.0,
            shift_profile=(0.0, 0.0, 0.0),
            adversarial_domains=(1,),
            seed=7,
        )
        clean, flipped, _ = data.gen_synthetic(spec)
        mu_clean = clean.features[clean.labels == 1].mean(axis=0)
        mu_flipped = flipped.features[flipped.labels == 1].mean(axis=0)
        # positive class sits on opposite sides of the origin
        assert mu_clean[0] > 1.0
        assert mu_flipped[0] < -1.0

    def test_profile_length_validated(self):
        with pytest.raises(DataError):
            data.gen_synthetic(
                data.SynthSpec(n_domains=2, docs_per_domain=10, dim=3, shift_profile=(0.0,))
            )


class TestSplitOracle:
    def test_stratified_ratio(self):
        spec = data.SynthSpec(n_domains=1, docs_per_domain=100, dim=3, seed=2)
        src = data.gen_synthetic(spec)[0]
        train, test = data.split_oracle(src, 0.8, RngStream(1, "split"))
        assert train.features.shape[0] == 80
        assert test.features.shape[0] == 20
        assert int((train.labels == 1).sum()) == 16
        assert int((test.labels == 1).sum()) == 4
        assert set(train.ids).isdisjoint(test.ids)
        assert sorted(train.ids + test.ids) == sorted(src.ids)

    def test_reproducible(self):
        spec = data.SynthSpec(n_domains=1, docs_per_domain=60, dim=3, seed=4)
        src = data.gen_synthetic(spec)[0]
        a = data.split_oracle(src, 0.8, RngStream(9, "s"))
        b = data.split_oracle(src, 0.8, RngStream(9, "s"))
        assert a[0].ids == b[0].ids and a[1].ids == b[1].ids

    def test_tiny_class_rejected(self):
        ds = data.DomainDataset(
            name="t",
            role="source",
            ids=["a", "b", "c"],
            labels=np.array([1, 0, 0], dtype=np.int8),
            features=np.zeros((3, 2), dtype=np.float32),
        )
        with pytest.raises(DataError):
            data.split_oracle(ds, 0.8, RngStream(1, "x"))

    def test_unlabeled_rejected(self):
        ds = tiny_dataset(labeled=False)
        with pytest.raises(DataError):
            data.split_oracle(ds, 0.8, RngStream(1, "x"))


class TestManifest:
    def test_load_manifest(self, tmp_path):
        spec = data.SynthSpec(n_domains=2, docs_per_domain=30, dim=3, seed=6)
        domains = data.gen_synthetic(spec)
        entries = []
        for ds in domains[:-1]:
            p = tmp_path / f"{ds.name}.jsonl"
            data.save_jsonl(ds, p)
            entries.append({"name": ds.name, "role": "source", "path": p.name, "dim": 3})
        tgt = data.as_unlabeled(domains[-1])
        data.save_jsonl(tgt, tmp_path / "target.jsonl")
        data.save_jsonl(domains[-1], tmp_path / "gold.jsonl")
        entries.append({"name": "target", "role": "target", "path": "target.jsonl", "dim": 3})
        mpath = tmp_path / "manifest.json"
        mpath.write_text(json.dumps({"domains": entries, "gold": "gold.jsonl"}))
        sources, target, gold = data.load_manifest(mpath)
        assert [s.name for s in sources] == [domains[0].name, domains[1].name]
        assert target.role == "target"
        assert gold is not None
        assert np.array_equal(gold.labels, domains[-1].labels)

    def test_dim_mismatch_rejected(self, tmp_path):
        ds = tiny_dataset(dim=3)
        data.save_jsonl(ds, tmp_path / "a.jsonl")
        m = {"domains": [{"name": "a", "role": "source", "path": "a.jsonl", "dim": 5}]}
        (tmp_path / "man.json").write_text(json.dumps(m))
        with pytest.raises(DataError):
            data.load_manifest(tmp_path / "man.json")
