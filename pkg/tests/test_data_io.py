import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csrms.data_io import (
    FeatureSet,
    SynthSpec,
    generate_synthetic,
    load_featureset,
    load_manifest,
    save_featureset,
)
from csrms.errors import ContractError, FormatError

from conftest import make_featureset


def _minimal_bytes(n=1, d=2, c=1, feats=(0.5, -1.0), labels=(0,)):
    out = struct.pack("<4sIII", b"FSB1", n, d, c)
    out += np.asarray(feats, dtype="<f4").tobytes()
    out += np.asarray(labels, dtype="<u4").tobytes()
    return out


def test_load_minimal_file(tmp_path):
    path = tmp_path / "one.fsb"
    path.write_bytes(_minimal_bytes())
    fs = load_featureset(path)
    assert (fs.n, fs.d, fs.c) == (1, 2, 1)
    assert np.allclose(fs.features, [[0.5, -1.0]])
    assert fs.labels.tolist() == [0]


def test_save_then_load_round_trip(tmp_path, rng):
    fs = make_featureset(
        rng.normal(size=(7, 3)).astype(np.float32).astype(np.float64),
        [0, 1, 2, 0, 1, 2, 0],
    )
    path = tmp_path / "rt.fsb"
    save_featureset(fs, path)
    back = load_featureset(path)
    assert np.array_equal(back.features, fs.features)
    assert np.array_equal(back.labels, fs.labels)


@settings(max_examples=40, deadline=None)
@given(data=st.data())
def test_round_trip_identity_property(tmp_path_factory, data):
    n = data.draw(st.integers(1, 30))
    d = data.draw(st.integers(1, 6))
    c = data.draw(st.integers(1, min(n, 4)))
    raw = data.draw(
        st.lists(
            st.floats(-1e4, 1e4, allow_nan=False, width=32),
            min_size=n * d,
            max_size=n * d,
        )
    )
    labels = list(range(c)) + data.draw(
        st.lists(st.integers(0, c - 1), min_size=n - c, max_size=n - c)
    )
    fs = make_featureset(
        np.asarray(raw, dtype=np.float32).astype(np.float64).reshape(n, d), labels, c
    )
    path = tmp_path_factory.mktemp("fsb") / "p.fsb"
    save_featureset(fs, path)
    first = path.read_bytes()
    back = load_featureset(path)
    assert np.array_equal(back.features, fs.features)
    assert np.array_equal(back.labels, fs.labels)
    save_featureset(back, path)
    assert path.read_bytes() == first  # byte-level identity


def test_bad_magic_offset_zero(tmp_path):
    path = tmp_path / "bad.fsb"
    path.write_bytes(b"NOPE" + _minimal_bytes()[4:])
    with pytest.raises(FormatError) as err:
        load_featureset(path)
    assert err.value.offset == 0


def test_truncated_payload_reports_offset(tmp_path):
    payload = _minimal_bytes()
    path = tmp_path / "trunc.fsb"
    path.write_bytes(payload[:-3])
    with pytest.raises(FormatError) as err:
        load_featureset(path)
    assert err.value.offset == len(payload) - 3
    assert "truncated" in str(err.value)


def test_label_out_of_range_offset(tmp_path):
    path = tmp_path / "lbl.fsb"
    path.write_bytes(_minimal_bytes(labels=(1,)))  # c == 1, label 1 invalid
    with pytest.raises(FormatError) as err:
        load_featureset(path)
    assert err.value.offset == 16 + 8  # header + 2 floats


def test_trailing_bytes_rejected(tmp_path):
    path = tmp_path / "trail.fsb"
    path.write_bytes(_minimal_bytes() + b"x")
    with pytest.raises(FormatError):
        load_featureset(path)


def test_non_finite_feature_rejected(tmp_path):
    path = tmp_path / "nan.fsb"
    path.write_bytes(_minimal_bytes(feats=(np.nan, 0.0)))
    with pytest.raises(FormatError) as err:
        load_featureset(path)
    assert err.value.offset == 16


def test_empty_class_rejected(tmp_path):
    path = tmp_path / "gap.fsb"
    path.write_bytes(_minimal_bytes(n=2, d=1, c=2, feats=(0.0, 1.0), labels=(0, 0)))
    with pytest.raises(FormatError):
        load_featureset(path)


def test_manifest_sidecar(tmp_path, rng):
    fs = make_featureset(rng.normal(size=(2, 2)), [0, 1])
    path = tmp_path / "with_manifest.fsb"
    save_featureset(fs, path, manifest={"source": "test", "backbone": "none", "split": "all", "created": "now"})
    manifest = load_manifest(path)
    assert manifest["source"] == "test"
    assert json.loads((tmp_path / "with_manifest.manifest.json").read_text()) == manifest


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------


def test_degenerate_spec_single_mode():
    fs = generate_synthetic(SynthSpec(classes=1, modes_per_class=1, d=3, samples_per_mode=5, seed=3))
    assert fs.n == 5
    assert np.all(fs.labels == 0)


def test_generator_determinism():
    spec = SynthSpec(classes=4, modes_per_class=2, d=6, samples_per_mode=20, overlap=0.4, seed=99)
    a = generate_synthetic(spec)
    b = generate_synthetic(spec)
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.labels, b.labels)


def test_generator_seed_sensitivity():
    base = SynthSpec(classes=3, modes_per_class=1, d=4, samples_per_mode=10, seed=1)
    other = SynthSpec(classes=3, modes_per_class=1, d=4, samples_per_mode=10, seed=2)
    assert not np.array_equal(
        generate_synthetic(base).features, generate_synthetic(other).features
    )


def _benchmark_set(seed=7):
    return generate_synthetic(
        SynthSpec(classes=10, modes_per_class=2, d=16, samples_per_mode=100,
                  mode_spread=0.25, overlap=0.3, seed=seed)
    )


def test_intra_mode_distances_below_cross_mode():
    fs = _benchmark_set()
    # Recover the generative mode from the sign of the own-class axis
    # projection (mode 0 positive, mode 1 antipodal).
    side = np.sign(fs.features[np.arange(fs.n), fs.labels])
    key = fs.labels * 2 + (side > 0)
    intra, cross, rng = [], [], np.random.Generator(np.random.PCG64(0))
    idx = rng.permutation(fs.n)[:400]
    for a_pos, a in enumerate(idx):
        for b in idx[a_pos + 1 :]:
            dist = float(np.linalg.norm(fs.features[a] - fs.features[b]))
            (intra if key[a] == key[b] else cross).append(dist)
    assert np.mean(intra) < np.mean(cross)


def test_overlap_creates_sub_spread_cross_class_pairs():
    fs = _benchmark_set()
    X, y = fs.features, fs.labels
    sq = np.sum(X * X, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2 * X @ X.T
    np.fill_diagonal(d2, np.inf)
    cross = y[:, None] != y[None, :]
    assert np.sqrt(max(d2[cross].min(), 0.0)) < 0.25


def test_same_class_pairs_live_in_distinct_modes():
    fs = _benchmark_set()
    for cls in range(fs.c):
        proj = fs.features[fs.labels == cls, cls]
        assert (proj > 0).any() and (proj < 0).any()


def test_generated_set_roundtrips_exactly(tmp_path):
    fs = _benchmark_set(seed=11)
    path = tmp_path / "gen.fsb"
    save_featureset(fs, path)
    back = load_featureset(path)
    assert np.array_equal(back.features, fs.features)


def test_spec_validation():
    with pytest.raises(ContractError):
        SynthSpec(classes=0, modes_per_class=1, d=2, samples_per_mode=3).validate()
    with pytest.raises(ContractError):
        SynthSpec(classes=1, modes_per_class=1, d=2, samples_per_mode=3, overlap=1.0).validate()
    with pytest.raises(ContractError):
        FeatureSet(n=1, d=1, c=2, features=np.zeros((1, 1)), labels=np.zeros(1, dtype=np.int64)).validate()
