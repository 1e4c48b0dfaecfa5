"""Parameterized audio deformations for robustness evaluation.

All kinds are pure functions of (signal, spec, track_seed); white noise draws
from a generator seeded by (track_seed, seed_salt) so a track always receives
the same noise regardless of which feature or probe is being evaluated.
The orchestrator enforces that these run on evaluation-split audio only.
"""

from __future__ import annotations

import logging
import math
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dataio, dsp
from .dataio import Signal

log = logging.getLogger(__name__)

KINDS = ("white_noise", "gain", "lowpass", "bit_depth", "external_codec", "codec_sim")

# kind -> (required param, validator)
_PARAM_OF_KIND = {
    "white_noise": "snr_db",
    "gain": "gain_db",
    "lowpass": "cutoff_hz",
    "bit_depth": "bits",
    "external_codec": "command",
    "codec_sim": None,
}


class DeformError(ValueError):
    pass


@dataclass(frozen=True)
class DeformationSpec:
    id: str
    kind: str
    params: dict
    seed_salt: int = 0

    def check(self) -> None:
        if not self.kind:
            raise DeformError(
                f"deformation {self.id!r}: exactly one deformation kind per spec "
                f"(got parameters {sorted(self.params)})")
        if self.kind not in KINDS:
            raise DeformError(f"unknown deformation kind {self.kind!r}")
        want = _PARAM_OF_KIND[self.kind]
        keys = set(self.params)
        if want is None:
            if keys:
                raise DeformError(
                    f"deformation {self.id!r}: codec_sim takes no parameters")
            return
        if keys != {want}:
            raise DeformError(
                f"deformation {self.id!r}: exactly one deformation kind per spec "
                f"(kind {self.kind!r} takes only {want!r}, got {sorted(keys)})")
        v = self.params[want]
        if self.kind == "white_noise" and not math.isfinite(float(v)):
            raise DeformError(f"deformation {self.id!r}: snr_db must be finite")
        if self.kind == "bit_depth" and not (1 <= int(v) <= 16):
            raise DeformError(f"deformation {self.id!r}: bits must be in [1, 16]")
        if self.kind == "lowpass" and float(v) <= 0:
            raise DeformError(f"deformation {self.id!r}: cutoff_hz must be positive")
        if self.kind == "external_codec" and not str(v).strip():
            raise DeformError(f"deformation {self.id!r}: empty codec command")


# ---------------------------------------------------------------------------
# kernels (public per-kind functions with precise returns)
# ---------------------------------------------------------------------------


def white_noise(signal: Signal, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Additive Gaussian noise hitting the requested SNR exactly.

    SNR is 10*log10(P_signal / P_noise) with P the mean squared amplitude;
    the drawn noise is renormalized to the exact target power.
    """
    x = signal.samples
    p_signal = float(np.mean(x ** 2))
    if p_signal == 0.0:
        raise DeformError("white_noise: zero-power signal, SNR undefined")
    noise = rng.standard_normal(len(x))
    target_rms = math.sqrt(p_signal / 10.0 ** (snr_db / 10.0))
    noise *= target_rms / math.sqrt(np.mean(noise ** 2))
    return x + noise


def gain(signal: Signal, gain_db: float) -> tuple[np.ndarray, int]:
    """Scale by 10^(db/20), saturating to [-1, 1]; returns (samples, clips)."""
    y = signal.samples * 10.0 ** (gain_db / 20.0)
    clipped = int(np.count_nonzero((y < -1.0) | (y > 1.0)))
    return np.clip(y, -1.0, 1.0), clipped


def bit_depth(signal: Signal, bits: int) -> np.ndarray:
    """Uniform mid-rise quantization to 2^bits levels over [-1, 1]."""
    step = 2.0 / (2 ** int(bits))
    y = step * (np.floor(signal.samples / step) + 0.5)
    return np.clip(y, -1.0 + step / 2.0, 1.0 - step / 2.0)


def external_codec(signal: Signal, command: str, workdir=None) -> Signal:
    """Round-trip through an external encoder command.

    The template must contain {in} and {out} placeholders; both files are
    WAV. A changed sample rate is resampled back to the input rate.
    """
    if "{in}" not in command or "{out}" not in command:
        raise DeformError("codec command must contain {in} and {out} placeholders")
    with tempfile.TemporaryDirectory(dir=workdir, prefix="codec-") as td:
        src = Path(td) / "in.wav"
        dst = Path(td) / "out.wav"
        dataio.write_wav(src, signal, encoding="pcm16")
        argv = [a.replace("{in}", str(src)).replace("{out}", str(dst))
                for a in shlex.split(command)]
        proc = subprocess.run(argv, capture_output=True, text=True)
        if proc.returncode != 0:
            raise DeformError(
                f"codec command failed (exit {proc.returncode}): {proc.stderr.strip()}")
        if not dst.exists():
            raise DeformError("codec command produced no output file")
        out = dataio.read_wav(dst)
    if out.sr != signal.sr:
        out = Signal(dsp.resample(out.samples, out.sr, signal.sr), signal.sr)
    return out


def codec_sim(signal: Signal) -> np.ndarray:
    """Offline stand-in for lossy-codec degradation: 2 kHz low-pass then
    8-bit quantization."""
    y = dsp.lowpass_fir(signal.samples, 2000.0, signal.sr)
    return bit_depth(Signal(y, signal.sr), 8)


def apply_deformation(signal: Signal, spec: DeformationSpec, track_seed: int) -> Signal:
    """Dispatch one deformation kind; deterministic per (signal, spec, seed)."""
    spec.check()
    if spec.kind == "white_noise":
        rng = np.random.default_rng([int(track_seed), int(spec.seed_salt)])
        y = white_noise(signal, float(spec.params["snr_db"]), rng)
    elif spec.kind == "gain":
        y, clipped = gain(signal, float(spec.params["gain_db"]))
        if clipped:
            log.debug("gain %s clipped %d samples", spec.id, clipped)
    elif spec.kind == "lowpass":
        cutoff = float(spec.params["cutoff_hz"])
        if cutoff >= signal.sr / 2.0:
            raise DeformError(
                f"deformation {spec.id!r}: cutoff {cutoff} above Nyquist of {signal.sr}")
        y = dsp.lowpass_fir(signal.samples, cutoff, signal.sr)
    elif spec.kind == "bit_depth":
        y = bit_depth(signal, int(spec.params["bits"]))
    elif spec.kind == "codec_sim":
        y = codec_sim(signal)
    elif spec.kind == "external_codec":
        return external_codec(signal, str(spec.params["command"]))
    else:  # pragma: no cover - check() guards this
        raise DeformError(f"unknown deformation kind {spec.kind!r}")
    return Signal(np.asarray(y, dtype=np.float64), signal.sr)


def measure_snr(clean: np.ndarray, deformed: np.ndarray) -> float:
    """10*log10(P_clean / P_residual); +inf when the residual is zero
    (callers report that as "identical")."""
    clean = np.asarray(clean, dtype=np.float64)
    deformed = np.asarray(deformed, dtype=np.float64)
    if clean.shape != deformed.shape:
        raise DeformError(
            f"length mismatch: {clean.shape} vs {deformed.shape}")
    p_clean = float(np.mean(clean ** 2))
    if p_clean == 0.0:
        raise DeformError("measure_snr: clean signal has zero power")
    p_resid = float(np.mean((deformed - clean) ** 2))
    if p_resid == 0.0:
        return math.inf
    return 10.0 * math.log10(p_clean / p_resid)
