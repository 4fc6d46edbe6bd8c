import json
from pathlib import Path

import numpy as np
import pytest

from trocab.nn import TrainConfig, init_mlp, train
from trocab.rawpipe import (
    FLAG_EXEC,
    FLAG_READ,
    FLAG_WRITE,
    RAW_DIM,
    BadMagic,
    BlobError,
    EntryOutOfRange,
    GeneratorConfig,
    OverlappingSections,
    SampleBlob,
    Section,
    Truncated,
    byte_histogram,
    entry_features,
    extract_raw,
    fnv1a64,
    import_hash_features,
    parse_blob,
    section_features,
    serialize_blob,
    synth_dataset,
    synth_sample,
)

DATA = Path(__file__).parent / "data"


def make_blob(body=b"\x01\x02\x03\x04" * 8, entry=1):
    sec = Section(name=b".text\x00\x00\x00", offset=0, size=len(body), flags=FLAG_EXEC | FLAG_READ)
    return SampleBlob(entry_point=entry, sections=[sec], import_names=[b"a.dll:F"], body=body)


class TestWireFormat:
    def test_round_trip(self):
        blob = make_blob()
        parsed = parse_blob(serialize_blob(blob))
        assert parsed == blob

    def test_serialize_deterministic(self):
        assert serialize_blob(make_blob()) == serialize_blob(make_blob())

    def test_minimal_blob_is_13_bytes(self):
        raw = serialize_blob(SampleBlob(entry_point=0))
        assert len(raw) == 13
        assert parse_blob(raw) == SampleBlob(entry_point=0)

    def test_parse_serialize_identity_on_canonical_bytes(self):
        raw = serialize_blob(make_blob())
        assert serialize_blob(parse_blob(raw)) == raw

    def test_bad_magic(self):
        raw = bytearray(serialize_blob(make_blob()))
        raw[0] ^= 0xFF
        with pytest.raises(BadMagic):
            parse_blob(bytes(raw))

    def test_truncated_field(self):
        raw = serialize_blob(make_blob())
        with pytest.raises(Truncated):
            parse_blob(raw[:7])

    def test_section_past_body_is_truncated_error(self):
        # chop body bytes off a valid encoding: the declared section now
        # extends past the body, which the documented check order reports
        # as Truncated (bounds before overlap)
        good = serialize_blob(make_blob())
        with pytest.raises(Truncated):
            parse_blob(good[:-4])

    def test_overlapping_sections(self):
        body = b"\x00" * 64
        sections = [
            Section(name=b".text\x00\x00\x00", offset=0, size=40, flags=FLAG_EXEC),
            Section(name=b".data\x00\x00\x00", offset=30, size=20, flags=FLAG_READ),
        ]
        blob = SampleBlob(entry_point=0, sections=sections, import_names=[], body=body)
        with pytest.raises(OverlappingSections):
            serialize_blob(blob)

    def test_entry_out_of_range(self):
        blob = make_blob(entry=999)
        with pytest.raises(EntryOutOfRange):
            serialize_blob(blob)
        # entry inside a non-exec section is also invalid
        body = b"\x00" * 32
        sec = Section(name=b".data\x00\x00\x00", offset=0, size=32, flags=FLAG_READ)
        with pytest.raises(EntryOutOfRange):
            serialize_blob(SampleBlob(entry_point=1, sections=[sec], body=body))

    def test_nonzero_entry_without_sections_rejected(self):
        with pytest.raises(EntryOutOfRange):
            serialize_blob(SampleBlob(entry_point=3))


class TestFeatures:
    def test_histogram_all_zero_body(self):
        blob = make_blob(body=b"\x00" * 256, entry=0)
        h = byte_histogram(blob)
        assert h[0] == 1.0 and np.all(h[1:] == 0.0)

    def test_histogram_uniform(self):
        blob = make_blob(body=bytes(range(256)), entry=0)
        assert np.allclose(byte_histogram(blob), 1 / 256)

    def test_histogram_sums_to_one(self):
        rng = np.random.default_rng(0)
        body = bytes(rng.integers(0, 256, size=1000, dtype=np.uint8))
        blob = make_blob(body=body, entry=0)
        h = byte_histogram(blob)
        assert np.all(h >= 0)
        assert np.isclose(h.sum(), 1.0, atol=1e-12)

    def test_empty_body_zero_histogram(self):
        assert np.all(byte_histogram(SampleBlob(entry_point=0)) == 0.0)

    def test_import_hash_empty(self):
        assert np.all(import_hash_features(SampleBlob(entry_point=0)) == 0.0)

    def test_import_hash_single_mass(self):
        blob = SampleBlob(entry_point=0, import_names=[b"x.dll:Open"])
        f = import_hash_features(blob)
        assert f.sum() == 1.0 and (f == 1.0).sum() == 1
        assert np.flatnonzero(f)[0] == fnv1a64(b"x.dll:Open") % 64

    def test_duplicate_imports_same_bucket(self):
        blob = SampleBlob(entry_point=0, import_names=[b"a", b"a", b"a"])
        f = import_hash_features(blob)
        assert f[fnv1a64(b"a") % 64] == 1.0

    def test_section_features_no_sections(self):
        assert np.all(section_features(SampleBlob(entry_point=0)) == 0.0)

    def test_section_entropy_degenerate_and_max(self):
        zero = make_blob(body=b"\x00" * 64, entry=0)
        f = section_features(zero)
        assert f[8] == f[9] == f[10] == 0.0
        distinct = make_blob(body=bytes(range(256)), entry=0)
        f = section_features(distinct)
        assert np.isclose(f[8], 8.0, atol=1e-12)

    def test_entry_ratio_extremes(self):
        blob = make_blob(entry=0)
        assert entry_features(blob)[0] == 0.0
        n = len(blob.body)
        blob = make_blob(entry=n - 1)
        assert np.isclose(entry_features(blob)[0], (n - 1) / n)

    def test_entry_features_golden(self):
        golden = json.loads((DATA / "entry_features_golden.json").read_text())
        blob = parse_blob(bytes.fromhex(golden["blob_hex"]))
        expected = np.array([float(v) for v in golden["entry_features"]])
        assert np.array_equal(entry_features(blob), expected)

    def test_extract_dimension_368(self):
        rng = np.random.default_rng(1)
        cfg = GeneratorConfig(feature_dim=8, body_min=32, body_max=128)
        for label in (0, 1):
            blob, _ = synth_sample(label, cfg, rng)
            assert extract_raw(blob).shape == (RAW_DIM,)
            assert RAW_DIM == 368

    def test_extract_deterministic(self):
        blob = make_blob()
        assert np.array_equal(extract_raw(blob), extract_raw(blob))


class TestGenerator:
    def test_same_seed_identical_sample(self):
        cfg = GeneratorConfig(feature_dim=8)
        b1, x1 = synth_sample(1, cfg, np.random.default_rng(5))
        b2, x2 = synth_sample(1, cfg, np.random.default_rng(5))
        assert b1 == b2 and np.array_equal(x1, x2)

    def test_zero_separation_equal_class_means(self):
        cfg = GeneratorConfig(feature_dim=8, separation=0.0, body_min=32, body_max=64)
        rng = np.random.default_rng(6)
        xs = {0: [], 1: []}
        for label in (0, 1):
            for _ in range(1500):
                _, x = synth_sample(label, cfg, rng)
                xs[label].append(x)
        gap = np.abs(np.mean(xs[0], axis=0) - np.mean(xs[1], axis=0))
        assert gap.max() < 0.05

    def test_dataset_balance_and_determinism(self):
        cfg = GeneratorConfig(feature_dim=8, body_min=32, body_max=64)
        X1, y1, blobs1 = synth_dataset(500, cfg, seed=9)
        X2, y2, blobs2 = synth_dataset(500, cfg, seed=9)
        assert np.array_equal(X1, X2) and np.array_equal(y1, y2) and blobs1 == blobs2
        assert abs(y1.mean() - 0.5) <= 0.02
        assert X1.min() >= 0.0 and X1.max() <= 1.0

    def test_generated_blobs_parse(self):
        cfg = GeneratorConfig(feature_dim=8, body_min=32, body_max=64)
        _, _, blobs = synth_dataset(100, cfg, seed=10)
        for raw in blobs:
            parse_blob(raw)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            GeneratorConfig(feature_dim=1)
        with pytest.raises(ValueError):
            GeneratorConfig(separation=-1.0)
        with pytest.raises(ValueError):
            GeneratorConfig(body_min=0)

    def test_training_oracle_small(self):
        # a fresh classifier must learn the generated task well
        cfg = GeneratorConfig(feature_dim=16, body_min=32, body_max=64, seed=13)
        X, y, _ = synth_dataset(2000, cfg, seed=14)
        params = init_mlp([16, 32, 2], seed=0)
        params.dropout_rate = 0.2
        tcfg = TrainConfig(learning_rate=2e-3, batch_size=128, max_epochs=50, patience=8, seed=0)
        _, history = train(params, (X[:1600], y[:1600]), (X[1600:], y[1600:]), tcfg)
        assert max(history["val_acc"]) >= 0.90


class TestFuzzSmoke:
    def test_mutated_blobs_raise_only_typed_errors(self):
        rng = np.random.default_rng(42)
        base = [serialize_blob(make_blob()) for _ in range(1)]
        cfg = GeneratorConfig(feature_dim=4, body_min=16, body_max=64)
        for label in (0, 1):
            blob, _ = synth_sample(label, cfg, rng)
            base.append(serialize_blob(blob))
        for _ in range(5000):
            raw = bytearray(base[rng.integers(0, len(base))])
            op = rng.integers(0, 4)
            if op == 0 and len(raw) > 1:
                raw = raw[: rng.integers(0, len(raw))]
            elif op == 1:
                for _ in range(int(rng.integers(1, 6))):
                    raw[rng.integers(0, len(raw))] = rng.integers(0, 256)
            elif op == 2:
                raw += bytes(rng.integers(0, 256, size=rng.integers(1, 32), dtype=np.uint8))
            else:
                raw = bytearray(rng.integers(0, 256, size=rng.integers(0, 64), dtype=np.uint8))
            try:
                blob = parse_blob(bytes(raw))
                extract_raw(blob)  # parsed blobs must be safely consumable
            except BlobError:
                pass
