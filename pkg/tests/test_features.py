"""Built-in extractors, aggregation, MRT1 files, and the plugin protocol."""

import json
import math
import struct
import sys
import textwrap

import numpy as np
import pytest

from repref import features
from repref.dataio import Signal
from repref.features import AggregationSpec, FeatureSpec


def _sine(freq=440.0, sr=16000, seconds=2.0, amp=0.3):
    t = np.arange(int(sr * seconds)) / sr
    return Signal(amp * np.sin(2 * np.pi * freq * t), sr)


def _spec(builtin, **kw):
    return FeatureSpec(id=builtin, builtin=builtin, **kw)


# ---------------------------------------------------------------------------
# builtins
# ---------------------------------------------------------------------------


def test_dimensionality_table():
    sig = _sine(seconds=3.0)
    for name, d in features.BUILTIN_DIMS.items():
        seq = features.extract_builtin(sig, _spec(name))
        assert seq.matrix.shape == (1, d)
        assert np.isfinite(seq.matrix).all()


def test_window_count_ceil_of_len_over_hop():
    sig = _sine(seconds=7.0)
    seq = features.extract_builtin(sig, _spec("mel_stats", window_s=3.0, hop_s=3.0))
    assert seq.matrix.shape[0] == math.ceil(7.0 / 3.0)
    short = _sine(seconds=0.4)
    seq = features.extract_builtin(short, _spec("mel_stats"))
    assert seq.matrix.shape[0] == 1  # zero-padded to one full window


def test_chroma_argmax_is_pitch_class_a():
    # analytic folding: a 440 Hz tone's dominant bins map to (round(12
    # log2(f/440)) + 69) mod 12 == 9, with C = 0
    seq = features.extract_builtin(_sine(440.0), _spec("chroma_stats"))
    window_mean = seq.matrix[0, :12]
    assert int(window_mean.argmax()) == 9


def test_chroma_octave_invariance():
    lo = features.extract_builtin(_sine(220.0), _spec("chroma_stats"))
    hi = features.extract_builtin(_sine(880.0), _spec("chroma_stats"))
    assert int(lo.matrix[0, :12].argmax()) == int(hi.matrix[0, :12].argmax()) == 9


def test_mel_stats_on_silence():
    sig = Signal(np.zeros(16000), 16000)
    seq = features.extract_builtin(sig, _spec("mel_stats"))
    means, stds = seq.matrix[0, :40], seq.matrix[0, 40:]
    assert np.allclose(means, math.log(1e-10), atol=1e-5)
    assert np.allclose(stds, 0.0, atol=1e-7)


def test_identical_windows_give_identical_rows():
    one = np.sin(2 * np.pi * 500.0 * np.arange(16000) / 16000) * 0.2
    sig = Signal(np.concatenate([one, one]), 16000)
    seq = features.extract_builtin(sig, _spec("mfcc_stats", window_s=1.0, hop_s=1.0))
    assert seq.matrix.shape == (2, 26)
    assert (seq.matrix[0] == seq.matrix[1]).all()


def test_extraction_deterministic():
    sig = _sine(620.0)
    a = features.extract_builtin(sig, _spec("mfcc_stats"))
    b = features.extract_builtin(sig, _spec("mfcc_stats"))
    assert (a.matrix == b.matrix).all()


def test_sr_mismatch_rejected():
    with pytest.raises(features.FeatureError, match="expected 16000"):
        features.extract_builtin(Signal(np.ones(100), 8000), _spec("mel_stats"))


def test_spec_validation():
    with pytest.raises(features.FeatureError, match="exactly one"):
        FeatureSpec(id="x").check()
    with pytest.raises(features.FeatureError, match="exactly one"):
        FeatureSpec(id="x", builtin="mel_stats", command="foo").check()
    with pytest.raises(features.FeatureError, match="unknown builtin"):
        FeatureSpec(id="x", builtin="nope").check()
    with pytest.raises(features.FeatureError, match="window_s"):
        FeatureSpec(id="x", builtin="mel_stats", window_s=1.0, hop_s=2.0).check()


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def test_aggregate_mean():
    m = np.array([[0.0, 2.0], [2.0, 0.0]])
    assert features.aggregate_representation(m, "mean").tolist() == [1.0, 1.0]


def test_aggregate_single_row_mean_std():
    m = np.array([[3.0, -1.0, 2.0]])
    out = features.aggregate_representation(m, "mean_std_concat")
    assert out.tolist() == [3.0, -1.0, 2.0, 0.0, 0.0, 0.0]


def test_aggregate_permutation_invariant():
    rng = np.random.default_rng(0)
    m = rng.standard_normal((7, 5))
    perm = m[rng.permutation(7)]
    for op in ("mean", "mean_std_concat"):
        np.testing.assert_allclose(features.aggregate_representation(m, op),
                                   features.aggregate_representation(perm, op),
                                   atol=1e-12)


def test_aggregation_spec_check():
    AggregationSpec().check()
    with pytest.raises(features.FeatureError):
        AggregationSpec(representation_op="median").check()
    with pytest.raises(features.FeatureError):
        AggregationSpec(mode="windowed").check()


# ---------------------------------------------------------------------------
# MRT1
# ---------------------------------------------------------------------------


def test_mrt1_byte_layout(tmp_path):
    p = tmp_path / "t.mrt"
    features.write_tensor_file(p, np.array([[0.5]], dtype=np.float32))
    blob = p.read_bytes()
    # magic(4) + dtype(1) + ndim(1) + dims(4*2) = 14 header bytes + 4 payload
    assert len(blob) == 14 + 4
    assert blob[:4] == b"MRT1"
    assert blob[4] == 1 and blob[5] == 2
    assert struct.unpack_from("<II", blob, 6) == (1, 1)
    assert struct.unpack_from("<f", blob, 14)[0] == 0.5


def test_mrt1_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(1)
    m = rng.standard_normal((7, 13)).astype(np.float32)
    p = tmp_path / "m.mrt"
    features.write_tensor_file(p, m)
    back = features.read_tensor_file(p)
    assert back.dtype == np.dtype("<f4") or back.dtype == np.float32
    assert (back == m).all()


def test_mrt1_bad_magic(tmp_path):
    p = tmp_path / "x.mrt"
    p.write_bytes(b"XXXX" + b"\x01\x01" + struct.pack("<I", 1) + b"\x00" * 4)
    with pytest.raises(features.TensorFileError, match="bad magic"):
        features.read_tensor_file(p)


def test_mrt1_wrong_dtype(tmp_path):
    p = tmp_path / "x.mrt"
    p.write_bytes(b"MRT1" + b"\x02\x01" + struct.pack("<I", 1) + b"\x00" * 8)
    with pytest.raises(features.TensorFileError, match="dtype"):
        features.read_tensor_file(p)


def test_mrt1_truncated_payload(tmp_path):
    p = tmp_path / "x.mrt"
    p.write_bytes(b"MRT1" + b"\x01\x02" + struct.pack("<II", 2, 3) + b"\x00" * 9)
    with pytest.raises(features.TensorFileError, match="truncated payload"):
        features.read_tensor_file(p)


# ---------------------------------------------------------------------------
# plugin protocol (a tiny python plugin stands in for a third-party tool)
# ---------------------------------------------------------------------------

_STUB = textwrap.dedent("""\
    import json, struct, sys
    import numpy as np

    def write_mrt(path, m):
        m = np.ascontiguousarray(m, dtype="<f4")
        h = b"MRT1" + struct.pack("<BB", 1, 2)
        h += struct.pack("<II", *m.shape)
        with open(path, "wb") as fh:
            fh.write(h + m.tobytes())

    manifest, outdir = sys.argv[1], sys.argv[2]
    d = int(sys.argv[3]) if len(sys.argv) > 3 else 8
    for line in open(manifest):
        if not line.strip():
            continue
        row = json.loads(line)
        write_mrt(f"{outdir}/{row['track_id']}.mrt",
                  np.full((2, d), 0.25, dtype=np.float32))
""")


def _stub_cmd(tmp_path, extra=""):
    script = tmp_path / "stub_plugin.py"
    script.write_text(_STUB)
    return f"{sys.executable} {script} {{manifest}} {{outdir}}" + extra


def _manifest(tmp_path, track_ids):
    man = tmp_path / "plugin_manifest.jsonl"
    features.write_plugin_manifest(
        man, [{"track_id": t, "audio_path": f"/x/{t}.wav", "window_s": 3.0,
               "hop_s": 3.0, "target_sr": 16000} for t in track_ids])
    return man


def test_plugin_roundtrip(tmp_path):
    spec = FeatureSpec(id="stub", command=_stub_cmd(tmp_path))
    man = _manifest(tmp_path, ["a", "b"])
    out = features.run_plugin_extractor(spec, man, tmp_path / "out")
    assert sorted(out) == ["a", "b"]
    m = features.read_tensor_file(out["a"])
    assert m.shape == (2, 8)
    assert (m == 0.25).all()


def test_plugin_nonzero_exit_surfaces_stderr(tmp_path):
    script = tmp_path / "bad.py"
    script.write_text("import sys; sys.stderr.write('kaput'); sys.exit(3)\n")
    spec = FeatureSpec(id="bad", command=f"{sys.executable} {script} {{manifest}} {{outdir}}")
    with pytest.raises(features.FeatureError, match="kaput"):
        features.run_plugin_extractor(spec, _manifest(tmp_path, ["a"]), tmp_path / "o")


def test_plugin_missing_output(tmp_path):
    script = tmp_path / "noop.py"
    script.write_text("pass\n")
    spec = FeatureSpec(id="noop", command=f"{sys.executable} {script} {{manifest}} {{outdir}}")
    with pytest.raises(features.FeatureError, match="missing output"):
        features.run_plugin_extractor(spec, _manifest(tmp_path, ["a"]), tmp_path / "o")


def test_plugin_inconsistent_dims(tmp_path):
    script = tmp_path / "incons.py"
    script.write_text(_STUB.replace(
        'd = int(sys.argv[3]) if len(sys.argv) > 3 else 8',
        'd = 8'
    ).replace(
        'np.full((2, d), 0.25, dtype=np.float32))',
        'np.full((2, 8 if row["track_id"] == "a" else 4), 0.25, dtype=np.float32))'
    ))
    spec = FeatureSpec(id="inc", command=f"{sys.executable} {script} {{manifest}} {{outdir}}")
    with pytest.raises(features.FeatureError, match="inconsistent feature dimensionality"):
        features.run_plugin_extractor(spec, _manifest(tmp_path, ["a", "b"]), tmp_path / "o")
