/**
 * Just enough DSP for a spectral-summary embedding: an iterative radix-2
 * FFT and log-spaced band energies over Hann-windowed frames.
 */

const FRAME = 1024;
const HOP = 512;
export const N_BANDS = 32;

/** In-place iterative radix-2 complex FFT (length must be a power of two). */
export function fft(re: Float64Array, im: Float64Array): void {
  const n = re.length;
  if (n !== im.length || (n & (n - 1)) !== 0) {
    throw new Error(`fft length must be a power of two, got ${n}`);
  }
  // bit reversal
  for (let i = 1, j = 0; i < n; i++) {
    let bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      [re[i], re[j]] = [re[j], re[i]];
      [im[i], im[j]] = [im[j], im[i]];
    }
  }
  for (let len = 2; len <= n; len <<= 1) {
    const ang = (-2 * Math.PI) / len;
    const wRe = Math.cos(ang);
    const wIm = Math.sin(ang);
    for (let i = 0; i < n; i += len) {
      let curRe = 1;
      let curIm = 0;
      for (let k = 0; k < len / 2; k++) {
        const uRe = re[i + k];
        const uIm = im[i + k];
        const vRe = re[i + k + len / 2] * curRe - im[i + k + len / 2] * curIm;
        const vIm = re[i + k + len / 2] * curIm + im[i + k + len / 2] * curRe;
        re[i + k] = uRe + vRe;
        im[i + k] = uIm + vIm;
        re[i + k + len / 2] = uRe - vRe;
        im[i + k + len / 2] = uIm - vIm;
        const nextRe = curRe * wRe - curIm * wIm;
        curIm = curRe * wIm + curIm * wRe;
        curRe = nextRe;
      }
    }
  }
}

function hann(n: number): Float64Array {
  const w = new Float64Array(n);
  for (let i = 0; i < n; i++) {
    w[i] = 0.5 - 0.5 * Math.cos((2 * Math.PI * i) / n);
  }
  return w;
}

const HANN = hann(FRAME);

/** Power spectrum of one zero-padded, Hann-windowed frame. */
export function framePower(chunk: Float64Array): Float64Array {
  const re = new Float64Array(FRAME);
  const im = new Float64Array(FRAME);
  for (let i = 0; i < Math.min(chunk.length, FRAME); i++) {
    re[i] = chunk[i] * HANN[i];
  }
  fft(re, im);
  const bins = FRAME / 2 + 1;
  const power = new Float64Array(bins);
  for (let k = 0; k < bins; k++) {
    power[k] = re[k] * re[k] + im[k] * im[k];
  }
  return power;
}

/** Bin index boundaries for N_BANDS log-spaced bands in [50, sr/2]. */
export function bandEdges(sampleRate: number): number[] {
  const fLo = 50;
  const fHi = sampleRate / 2;
  const edges: number[] = [];
  for (let b = 0; b <= N_BANDS; b++) {
    const f = fLo * Math.pow(fHi / fLo, b / N_BANDS);
    edges.push(Math.min(FRAME / 2, Math.round((f * FRAME) / sampleRate)));
  }
  return edges;
}

/**
 * One embedding row per analysis window: mean per-band log power over the
 * frames inside the window.
 */
export function bandEmbedding(window: Float64Array,
                              sampleRate: number): Float64Array {
  const edges = bandEdges(sampleRate);
  const nFrames = Math.max(1, Math.ceil(window.length / HOP));
  const bands = new Float64Array(N_BANDS);
  for (let t = 0; t < nFrames; t++) {
    const power = framePower(window.subarray(t * HOP, t * HOP + FRAME));
    for (let b = 0; b < N_BANDS; b++) {
      let acc = 0;
      const hi = Math.max(edges[b + 1], edges[b] + 1); // never an empty band
      for (let k = edges[b]; k < hi; k++) {
        acc += power[Math.min(k, power.length - 1)];
      }
      bands[b] += acc;
    }
  }
  for (let b = 0; b < N_BANDS; b++) {
    bands[b] = Math.log(bands[b] / nFrames + 1e-10);
  }
  return bands;
}
