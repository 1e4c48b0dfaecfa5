"""Dataset ingestion, split assignment, synthetic generators, WAV I/O.

Manifest formats (public contract):
  CSV        header ``track_id,audio_path,<task>[,group]``; multilabel cells
             are ``|``-separated.
  JSON-lines one object per track with the same keys; multilabel values are
             JSON arrays.

Relative audio paths are resolved against the manifest's directory. Label
vocabularies are sorted lexicographically so class indices are reproducible
without a stored mapping.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TASK_KINDS = ("multiclass", "multilabel", "key")

PITCH_NAMES = ["C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"]

# Synthetic audio is normalized to this peak so that additive deformations
# (down to 0 dB SNR) survive the saturating WAV writer without measurable
# SNR distortion.
SYNTH_PEAK = 0.3


class DataError(ValueError):
    pass


class WavError(DataError):
    pass


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass
class Signal:
    samples: np.ndarray  # float64 in [-1, 1], mono
    sr: int

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sr


@dataclass
class TrackRecord:
    track_id: str
    audio_path: Path
    labels: dict  # task_id -> str (multiclass/key) or frozenset[str]
    group: str | None = None
    duration_s: float | None = None


@dataclass
class SplitPolicy:
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    group_aware: bool = False
    seed: int = 0


@dataclass
class SplitAssignment:
    assignment: dict  # track_id -> "train" | "val" | "test"
    policy: SplitPolicy
    diagnostics: list = field(default_factory=list)

    def members(self, split: str) -> list:
        return sorted(t for t, s in self.assignment.items() if s == split)


@dataclass
class Dataset:
    dataset_id: str
    tasks: dict  # task_id -> kind
    label_vocab: dict  # task_id -> sorted list of labels
    tracks: list
    splits: SplitAssignment | None = None

    def track(self, track_id: str) -> TrackRecord:
        return self._by_id()[track_id]

    def _by_id(self):
        if not hasattr(self, "_index"):
            self._index = {t.track_id: t for t in self.tracks}
        return self._index

    def class_index(self, task_id: str, label: str) -> int:
        return self.label_vocab[task_id].index(label)


def _derive_vocab(tracks, tasks):
    vocab = {}
    for task in tasks:
        seen = set()
        for t in tracks:
            lab = t.labels[task]
            seen.update(lab if isinstance(lab, frozenset) else [lab])
        vocab[task] = sorted(seen)
    return vocab


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def load_manifest(path, task_kinds=None, dataset_id=None) -> Dataset:
    """Load a CSV or JSON-lines manifest into a Dataset.

    task_kinds optionally pins each task column's kind; without it, a task
    is multilabel when any cell carries multiple values (``|`` in CSV, an
    array in JSON-lines) and multiclass otherwise. The ``key`` kind is never
    inferred.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    rows = (_read_csv_rows if path.suffix.lower() == ".csv" else _read_jsonl_rows)(path)
    if not rows:
        raise DataError(f"empty dataset: {path}")

    required = ("track_id", "audio_path")
    for col in required:
        if col not in rows[0]:
            raise DataError(f"missing required column {col!r} in {path}")
    task_cols = [c for c in rows[0] if c not in required and c != "group"]
    if not task_cols:
        raise DataError(f"manifest declares no task columns: {path}")

    kinds = {}
    for task in task_cols:
        if task_kinds and task in task_kinds:
            kind = task_kinds[task]
            if kind not in TASK_KINDS:
                raise DataError(f"unknown task kind {kind!r} for task {task!r}")
        else:
            multi = any(isinstance(r.get(task), (list, tuple)) or
                        (isinstance(r.get(task), str) and "|" in r[task])
                        for r in rows)
            kind = "multilabel" if multi else "multiclass"
        kinds[task] = kind

    base = path.parent
    tracks, seen = [], set()
    for r in rows:
        tid = str(r["track_id"])
        if tid in seen:
            raise DataError(f"duplicate track_id {tid}")
        seen.add(tid)
        labels = {}
        for task in task_cols:
            raw = r.get(task)
            if raw is None or raw == "":
                raise DataError(f"track {tid} missing label for task {task!r}")
            if kinds[task] == "multilabel":
                vals = raw if isinstance(raw, (list, tuple)) else str(raw).split("|")
                labels[task] = frozenset(str(v) for v in vals)
            else:
                if isinstance(raw, (list, tuple)):
                    raise DataError(
                        f"track {tid}: task {task!r} is {kinds[task]} but has a list label")
                labels[task] = str(raw)
        group = r.get("group")
        tracks.append(TrackRecord(
            track_id=tid,
            audio_path=(base / str(r["audio_path"])).resolve(),
            labels=labels,
            group=str(group) if group not in (None, "") else None,
        ))

    return Dataset(
        dataset_id=dataset_id or path.stem,
        tasks=kinds,
        label_vocab=_derive_vocab(tracks, kinds),
        tracks=tracks,
    )


def _read_csv_rows(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))
    except OSError as e:
        raise DataError(f"unreadable manifest {path}: {e}") from e


def _read_jsonl_rows(path):
    rows = []
    try:
        with open(path, encoding="utf-8") as fh:
            for i, line in enumerate(fh, 1):
                if line.strip():
                    try:
                        rows.append(json.loads(line))
                    except json.JSONDecodeError as e:
                        raise DataError(f"{path}:{i}: bad JSON line: {e}") from e
    except OSError as e:
        raise DataError(f"unreadable manifest {path}: {e}") from e
    return rows


def write_manifest(dataset: Dataset, path) -> None:
    """Write a CSV manifest; audio paths become relative to the target dir."""
    path = Path(path)
    tasks = list(dataset.tasks)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        has_group = any(t.group for t in dataset.tracks)
        w.writerow(["track_id", "audio_path"] + tasks + (["group"] if has_group else []))
        for t in dataset.tracks:
            cells = [t.track_id, _relpath_or_abs(t.audio_path, path.parent)]
            for task in tasks:
                lab = t.labels[task]
                cells.append("|".join(sorted(lab)) if isinstance(lab, frozenset) else lab)
            if has_group:
                cells.append(t.group or "")
            w.writerow(cells)


def _relpath_or_abs(p: Path, base: Path) -> str:
    try:
        return str(Path(p).resolve().relative_to(base.resolve()))
    except ValueError:
        return str(p)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def split_dataset(dataset: Dataset, policy: SplitPolicy) -> SplitAssignment:
    """Deterministic train/val/test assignment.

    Stratified by the first declared task when not group_aware (multilabel
    strata use the lexicographically first label of each track); group_aware
    keeps groups intact, assigning whole groups greedily to the split with
    the largest remaining deficit.
    """
    r = policy.ratios
    if len(r) != 3 or any(x <= 0 for x in r) or abs(sum(r) - 1.0) > 1e-9:
        raise DataError(f"split ratios must be positive and sum to 1, got {r}")
    if len(dataset.tracks) < 3:
        raise DataError("dataset too small to populate all three splits")

    rng = np.random.default_rng(policy.seed)
    splits = ("train", "val", "test")
    assignment = {}

    if policy.group_aware:
        groups = {}
        for t in dataset.tracks:
            groups.setdefault(t.group or f"__solo__{t.track_id}", []).append(t.track_id)
        names = sorted(groups)
        rng.shuffle(names)
        names.sort(key=lambda g: -len(groups[g]))  # stable: big groups first
        counts = {s: 0 for s in splits}
        placed = 0
        for g in names:
            placed += len(groups[g])
            deficits = [(r[i] * placed - counts[s], -i) for i, s in enumerate(splits)]
            target = splits[max(range(3), key=lambda i: deficits[i])]
            for tid in groups[g]:
                assignment[tid] = target
            counts[target] += len(groups[g])
    else:
        first_task = next(iter(dataset.tasks))
        strata = {}
        for t in dataset.tracks:
            lab = t.labels[first_task]
            key = min(lab) if isinstance(lab, frozenset) else lab
            strata.setdefault(key, []).append(t.track_id)
        for key in sorted(strata):
            ids = sorted(strata[key])
            rng.shuffle(ids)
            for tid, s in zip(ids, _largest_remainder_order(len(ids), r)):
                assignment[tid] = s

    diags = []
    for s in splits:
        if not any(v == s for v in assignment.values()):
            raise DataError(f"dataset too small to populate all three splits ({s} empty)")
    train_ids = {t for t, s in assignment.items() if s == "train"}
    by_id = {t.track_id: t for t in dataset.tracks}
    for task, vocab in dataset.label_vocab.items():
        present = set()
        for tid in train_ids:
            lab = by_id[tid].labels[task]
            present.update(lab if isinstance(lab, frozenset) else [lab])
        for missing in sorted(set(vocab) - present):
            diags.append(f"task {task!r}: class {missing!r} absent from train split")

    return SplitAssignment(assignment=assignment, policy=policy, diagnostics=diags)


def _largest_remainder_order(n, ratios):
    """Per-split quota for n items, then an assignment sequence."""
    raw = [n * x for x in ratios]
    counts = [int(math.floor(x)) for x in raw]
    rem = n - sum(counts)
    order = sorted(range(3), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:rem]:
        counts[i] += 1
    seq = []
    for s, c in zip(("train", "val", "test"), counts):
        seq.extend([s] * c)
    return seq


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------


def _adsr(n, sr, attack=0.010, decay=0.050, sustain=0.8, release=0.100):
    env = np.full(n, sustain)
    a = min(int(round(attack * sr)), n)
    d = min(int(round(decay * sr)), n - a)
    rl = min(int(round(release * sr)), n - a - d)
    env[:a] = np.linspace(0.0, 1.0, a, endpoint=False)
    env[a:a + d] = np.linspace(1.0, sustain, d, endpoint=False)
    if rl:
        env[n - rl:] = np.linspace(sustain, 0.0, rl)
    return env


_TIMBRES = {
    "sine": [(1, 1.0)],
    "saw": [(k, 1.0 / k) for k in range(1, 9)],
    "square": [(k, 1.0 / k) for k in range(1, 10, 2)],
}


def synth_tonebank(out_dir, seed=0, n_per_class=10, octaves=(3, 4, 5),
                   timbre_families=("sine", "saw", "square"), sr=16000,
                   duration_s=2.0, detune_cents_max=10.0) -> Dataset:
    """Single-note bank: 12 pitch classes x n_per_class tracks.

    Each track picks a random octave, timbre family, and one detune value in
    +/- detune_cents_max cents; fully determined by the seed (byte-identical
    regeneration). Tasks: pitch_class (12 classes) and timbre.
    """
    if sr < 8000:
        raise DataError(f"sr must be >= 8000, got {sr}")
    for fam in timbre_families:
        if fam not in _TIMBRES:
            raise DataError(f"unknown timbre family {fam!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([int(seed), 0x70E5])
    n = int(round(duration_s * sr))
    t = np.arange(n) / sr

    tracks = []
    for pc in range(12):
        for i in range(n_per_class):
            octave = int(rng.choice(list(octaves)))
            timbre = str(rng.choice(list(timbre_families)))
            detune = float(rng.uniform(-detune_cents_max, detune_cents_max))
            midi = 12 * (octave + 1) + pc
            f0 = 440.0 * 2.0 ** ((midi - 69) / 12.0) * 2.0 ** (detune / 1200.0)
            x = np.zeros(n)
            for k, amp in _TIMBRES[timbre]:
                if k * f0 < sr / 2.0:
                    x += amp * np.sin(2.0 * np.pi * k * f0 * t)
            x *= _adsr(n, sr)
            peak = np.abs(x).max()
            if peak > 0:
                x *= SYNTH_PEAK / peak
            tid = f"{PITCH_NAMES[pc].replace('#', 's')}{octave}_{timbre}_{i:03d}"
            wav = out_dir / f"{tid}.wav"
            write_wav(wav, Signal(x, sr), encoding="pcm16")
            tracks.append(TrackRecord(
                track_id=tid, audio_path=wav.resolve(),
                labels={"pitch_class": PITCH_NAMES[pc], "timbre": timbre},
                duration_s=duration_s))

    tasks = {"pitch_class": "multiclass", "timbre": "multiclass"}
    ds = Dataset("tonebank", tasks, _derive_vocab(tracks, tasks), tracks)
    write_manifest(ds, out_dir / "manifest.csv")
    return ds


def _band_noise(rng, n, sr, f_lo, f_hi):
    """Gaussian noise band-limited to [f_lo, f_hi] by rfft masking, rms 1."""
    x = rng.standard_normal(n)
    spec = np.fft.rfft(x)
    freqs = np.arange(len(spec)) * (sr / n)
    spec[(freqs < f_lo) | (freqs > f_hi)] = 0.0
    y = np.fft.irfft(spec, n)
    return y / max(np.sqrt(np.mean(y ** 2)), 1e-12)


def synth_noiseband(out_dir, seed=0, n_classes=4, n_per_class=30, sr=16000,
                    duration_s=2.0) -> Dataset:
    """Band-limited noise classes (1/3-octave bands, log-spaced centers in
    [200, sr/4]) with a class-specific amplitude-modulation rate of
    1..n_classes Hz. Task "band", multiclass."""
    if n_classes < 2:
        raise DataError("need at least 2 classes")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([int(seed), 0xBA2D])
    n = int(round(duration_s * sr))
    t = np.arange(n) / sr
    centers = np.geomspace(200.0, sr / 4.0, n_classes)
    width = len(str(n_classes - 1))

    tracks = []
    for c, fc in enumerate(centers):
        label = f"band{c:0{width}d}"
        for j in range(n_per_class):
            x = _band_noise(rng, n, sr, fc * 2 ** (-1 / 6), fc * 2 ** (1 / 6))
            x *= 1.0 + 0.8 * np.sin(2.0 * np.pi * (c + 1) * t)
            x *= SYNTH_PEAK / np.abs(x).max()
            tid = f"{label}_{j:03d}"
            wav = out_dir / f"{tid}.wav"
            write_wav(wav, Signal(x, sr), encoding="pcm16")
            tracks.append(TrackRecord(tid, wav.resolve(), {"band": label},
                                      duration_s=duration_s))

    tasks = {"band": "multiclass"}
    ds = Dataset("noiseband", tasks, _derive_vocab(tracks, tasks), tracks)
    write_manifest(ds, out_dir / "manifest.csv")
    return ds


def synth_xorband(out_dir, seed=0, n_per_cluster=40, sr=16000,
                  duration_s=2.0) -> Dataset:
    """Two independent noise bands at two possible levels each; the class is
    the parity of the two level bits ("same" vs "diff").

    The level bits are linearly readable from log-mel energies but their
    parity is not, so a linear probe fails where a hidden layer succeeds.
    Tracks are left un-normalized on purpose: per-track normalization would
    couple the two bands and leak parity into the overall gain.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([int(seed), 0x804B])
    n = int(round(duration_s * sr))
    levels = (0.015, 0.1)  # rms per band: low, high

    tracks = []
    for a in (0, 1):
        for b in (0, 1):
            label = "same" if a == b else "diff"
            for j in range(n_per_cluster):
                x = (levels[a] * _band_noise(rng, n, sr, 350.0, 700.0)
                     + levels[b] * _band_noise(rng, n, sr, 2500.0, 5000.0))
                tid = f"ab{a}{b}_{j:03d}"
                wav = out_dir / f"{tid}.wav"
                write_wav(wav, Signal(x, sr), encoding="pcm16")
                tracks.append(TrackRecord(tid, wav.resolve(), {"parity": label},
                                          duration_s=duration_s))

    tasks = {"parity": "multiclass"}
    ds = Dataset("xorband", tasks, _derive_vocab(tracks, tasks), tracks)
    write_manifest(ds, out_dir / "manifest.csv")
    return ds


SYNTH_KINDS = {
    "tonebank": synth_tonebank,
    "noiseband": synth_noiseband,
    "xor": synth_xorband,
}


# ---------------------------------------------------------------------------
# WAV I/O (RIFF, PCM16 / IEEE float32 only; stereo averaged to mono on read)
# ---------------------------------------------------------------------------


def read_wav(path) -> Signal:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise WavError(f"unreadable WAV {path}: {e}") from e
    if len(blob) < 12 or blob[:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise WavError(f"malformed WAV header: {path}")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(blob):
        cid = blob[pos:pos + 4]
        (size,) = struct.unpack_from("<I", blob, pos + 4)
        body = blob[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if size < 16:
                raise WavError(f"malformed fmt chunk: {path}")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned
    if fmt is None or data is None:
        raise WavError(f"malformed WAV (missing fmt or data chunk): {path}")

    codec, channels, sr, _, _, bits = fmt
    if codec == 1 and bits == 16:
        samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32768.0
    elif codec == 3 and bits == 32:
        samples = np.frombuffer(data, dtype="<f4").astype(np.float64)
    else:
        raise WavError(
            f"unsupported WAV codec (format tag {codec}, {bits}-bit): {path}")
    if channels < 1:
        raise WavError(f"malformed WAV (zero channels): {path}")
    if channels > 1:
        samples = samples[:len(samples) - len(samples) % channels]
        samples = samples.reshape(-1, channels).mean(axis=1)
    return Signal(samples=samples, sr=sr)


def write_wav(path, signal: Signal, encoding: str = "float32") -> int:
    """Write mono WAV; out-of-range samples saturate to [-1, 1].

    Returns the number of clipped samples.
    """
    x = np.asarray(signal.samples, dtype=np.float64)
    clipped = int(np.count_nonzero((x < -1.0) | (x > 1.0)))
    x = np.clip(x, -1.0, 1.0)
    if encoding == "float32":
        codec, bits = 3, 32
        payload = x.astype("<f4").tobytes()
    elif encoding == "pcm16":
        codec, bits = 1, 16
        # scale matches the decoder's 1/32768 so round-trip error <= 1/32768
        ints = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
        payload = ints.tobytes()
    else:
        raise WavError(f"unknown encoding {encoding!r}")

    block = bits // 8
    header = b"".join([
        b"RIFF", struct.pack("<I", 36 + len(payload)), b"WAVE",
        b"fmt ", struct.pack("<IHHIIHH", 16, codec, 1, signal.sr,
                             signal.sr * block, block, bits),
        b"data", struct.pack("<I", len(payload)),
    ])
    Path(path).write_bytes(header + payload)
    return clipped
