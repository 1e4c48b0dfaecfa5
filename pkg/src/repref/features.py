"""Per-window feature extraction and aggregation.

Built-in extractors (dimensionality table):

  mfcc_stats    13 DCT-II coefficients (c0 kept) of log mel power,
                mean||std over frames          -> d = 26
  mel_stats     mean||std of 40 log-mel bands  -> d = 80
  chroma_stats  12 pitch classes folded from STFT magnitudes in
                [65, 2093] Hz, per-frame L2 norm, mean||std -> d = 24

Analysis settings shared by all builtins: n_fft 1024, frame hop 512,
40 mel bands over [0, sr/2]. A track is cut into windows of window_s
seconds every hop_s seconds (ceil(len/hop) windows, at least one; the
tail is zero-padded) and each window is summarized independently.

External extractors run as subprocesses and exchange MRT1 tensor files
(little-endian: magic ``MRT1`` | dtype u8 (1 = f32le) | ndim u8 |
dims u32 x ndim | row-major f32 payload).
"""

from __future__ import annotations

import json
import shlex
import struct
import subprocess
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp

BUILTIN_NAMES = ("mfcc_stats", "mel_stats", "chroma_stats")
BUILTIN_DIMS = {"mfcc_stats": 26, "mel_stats": 80, "chroma_stats": 24}

_N_FFT = 1024
_FRAME_HOP = 512
_N_MELS = 40
_LOG_FLOOR = 1e-10
_CHROMA_FMIN = 65.0
_CHROMA_FMAX = 2093.0


class FeatureError(ValueError):
    pass


class TensorFileError(FeatureError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    id: str
    builtin: str | None = None      # exactly one of builtin / command
    command: str | None = None
    window_s: float = 3.0
    hop_s: float = 3.0
    target_sr: int = 16000

    def check(self) -> None:
        if (self.builtin is None) == (self.command is None):
            raise FeatureError(
                f"feature {self.id!r}: exactly one of builtin/command required")
        if self.builtin is not None and self.builtin not in BUILTIN_NAMES:
            raise FeatureError(
                f"feature {self.id!r}: unknown builtin {self.builtin!r} "
                f"(known: {', '.join(BUILTIN_NAMES)})")
        if self.command is not None and not self.command.strip():
            raise FeatureError(f"feature {self.id!r}: empty plugin command")
        if not (self.window_s >= self.hop_s > 0):
            raise FeatureError(
                f"feature {self.id!r}: need window_s >= hop_s > 0")
        if self.target_sr < 1:
            raise FeatureError(f"feature {self.id!r}: bad target_sr")


@dataclass
class FeatureSequence:
    track_id: str
    matrix: np.ndarray  # [n_windows, d] float32
    provenance: tuple  # (feature_id, deformation_id, extractor version)

    @property
    def d(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class AggregationSpec:
    representation_op: str = "mean"       # mean | mean_std_concat
    prediction_op: str = "mean_prob"
    mode: str = "representation"          # representation | prediction

    def check(self) -> None:
        if self.representation_op not in ("mean", "mean_std_concat"):
            raise FeatureError(
                f"unknown representation_op {self.representation_op!r}")
        if self.prediction_op != "mean_prob":
            raise FeatureError(f"unknown prediction_op {self.prediction_op!r}")
        if self.mode not in ("representation", "prediction"):
            raise FeatureError(f"unknown aggregation mode {self.mode!r}")


# ---------------------------------------------------------------------------
# built-in extraction
# ---------------------------------------------------------------------------


def _window_bounds(n_samples, window, hop):
    n_windows = max(1, -(-n_samples // hop))
    return [(w * hop, w * hop + window) for w in range(n_windows)]


def _frame_summaries(window_samples, sr, kind):
    spec = dsp.stft(window_samples, _N_FFT, _FRAME_HOP, sr=sr)
    if kind == "chroma_stats":
        freqs = spec.bin_frequencies()
        keep = (freqs >= _CHROMA_FMIN) & (freqs <= _CHROMA_FMAX)
        pc = (np.round(12.0 * np.log2(freqs[keep] / 440.0)).astype(int) + 69) % 12
        chroma = np.zeros((spec.n_frames, 12))
        for cls in range(12):
            chroma[:, cls] = spec.magnitudes[:, keep][:, pc == cls].sum(axis=1)
        norms = np.linalg.norm(chroma, axis=1, keepdims=True)
        return chroma / np.where(norms > 0, norms, 1.0)
    fb = dsp.mel_filterbank(_N_MELS, _N_FFT, sr)
    logmel = np.log(spec.magnitudes ** 2 @ fb.T + _LOG_FLOOR)
    if kind == "mel_stats":
        return logmel
    return dsp.dct_ii(logmel, 13)  # mfcc_stats


def extract_builtin(signal, spec: FeatureSpec, track_id: str = "") -> FeatureSequence:
    """Run one builtin extractor over a track already at spec.target_sr."""
    spec.check()
    if spec.builtin is None:
        raise FeatureError(f"feature {spec.id!r} is not a builtin")
    sr = signal.sr
    if sr != spec.target_sr:
        raise FeatureError(
            f"feature {spec.id!r}: signal at {sr} Hz, expected {spec.target_sr}")
    x = np.asarray(signal.samples, dtype=np.float64)
    if len(x) < 1:
        raise FeatureError("empty signal")
    window = int(round(spec.window_s * sr))
    hop = int(round(spec.hop_s * sr))
    rows = []
    for lo, hi in _window_bounds(len(x), window, hop):
        chunk = np.zeros(window)
        part = x[lo:min(hi, len(x))]
        chunk[:len(part)] = part
        per_frame = _frame_summaries(chunk, sr, spec.builtin)
        rows.append(np.concatenate([per_frame.mean(axis=0), per_frame.std(axis=0)]))
    matrix = np.asarray(rows, dtype=np.float32)
    if not np.isfinite(matrix).all():
        raise FeatureError(f"feature {spec.id!r}: non-finite values extracted")
    return FeatureSequence(track_id=track_id, matrix=matrix,
                           provenance=(spec.id, "CLEAN", "builtin-1"))


def aggregate_representation(seq_matrix, op: str) -> np.ndarray:
    """Collapse [n_windows, d] to one vector: column means, or means
    concatenated with population stds."""
    m = np.asarray(seq_matrix)
    if m.ndim != 2 or m.shape[0] < 1:
        raise FeatureError("expected a nonempty [n_windows, d] matrix")
    if op == "mean":
        return m.mean(axis=0)
    if op == "mean_std_concat":
        return np.concatenate([m.mean(axis=0), m.std(axis=0)])
    raise FeatureError(f"unknown representation_op {op!r}")


# ---------------------------------------------------------------------------
# MRT1 tensor files
# ---------------------------------------------------------------------------

_MAGIC = b"MRT1"
_DTYPE_F32LE = 1


def write_tensor_file(path, matrix) -> None:
    arr = np.ascontiguousarray(matrix, dtype="<f4")
    header = _MAGIC + struct.pack("<BB", _DTYPE_F32LE, arr.ndim)
    header += b"".join(struct.pack("<I", d) for d in arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_tensor_file(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 6 or blob[:4] != _MAGIC:
        raise TensorFileError(f"bad magic in {path}")
    dtype, ndim = struct.unpack_from("<BB", blob, 4)
    if dtype != _DTYPE_F32LE:
        raise TensorFileError(f"unsupported dtype tag {dtype} in {path} (want f32le)")
    if len(blob) < 6 + 4 * ndim:
        raise TensorFileError(f"truncated header in {path}")
    dims = struct.unpack_from(f"<{ndim}I", blob, 6)
    payload = blob[6 + 4 * ndim:]
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(payload) != 4 * count:
        raise TensorFileError(
            f"truncated payload in {path}: {len(payload)} bytes for shape {dims}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


# ---------------------------------------------------------------------------
# plugin protocol
# ---------------------------------------------------------------------------


def write_plugin_manifest(path, entries) -> None:
    """entries: iterables of dicts with track_id, audio_path, window_s,
    hop_s, target_sr (one JSON object per line)."""
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


def run_plugin_extractor(spec: FeatureSpec, manifest_path, out_dir) -> dict:
    """Run one plugin subprocess over a whole manifest.

    The command template gets {manifest} and {outdir} substituted. The
    plugin must exit 0 and leave one <track_id>.mrt per manifest line; this
    verifies presence, a consistent feature dimension, and finiteness.
    Returns {track_id: Path}.
    """
    spec.check()
    if spec.command is None:
        raise FeatureError(f"feature {spec.id!r} is not a plugin")
    manifest_path = Path(manifest_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    track_ids = []
    with open(manifest_path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                track_ids.append(str(json.loads(line)["track_id"]))

    argv = [a.replace("{manifest}", str(manifest_path)).replace("{outdir}", str(out_dir))
            for a in shlex.split(spec.command)]
    proc = subprocess.run(argv, capture_output=True, text=True)
    if proc.returncode != 0:
        raise FeatureError(
            f"plugin {spec.id!r} failed (exit {proc.returncode}): "
            f"{proc.stderr.strip()}")

    out = {}
    d = None
    for tid in track_ids:
        f = out_dir / f"{tid}.mrt"
        if not f.exists():
            raise FeatureError(f"plugin {spec.id!r}: missing output file {f.name}")
        m = read_tensor_file(f)
        if m.ndim != 2:
            raise FeatureError(
                f"plugin {spec.id!r}: {f.name} has ndim {m.ndim}, want 2")
        if d is None:
            d = m.shape[1]
        elif m.shape[1] != d:
            raise FeatureError(
                f"plugin {spec.id!r}: inconsistent feature dimensionality "
                f"({f.name} has d={m.shape[1]}, expected {d})")
        if not np.isfinite(m).all():
            raise FeatureError(f"plugin {spec.id!r}: non-finite values in {f.name}")
        out[tid] = f
    return out
