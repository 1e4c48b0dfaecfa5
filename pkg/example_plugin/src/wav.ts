/**
 * Minimal RIFF/WAVE reader: PCM16 and IEEE float32, mono or stereo
 * (stereo is averaged to mono). Deliberately self-contained so the plugin
 * models a third-party tool with no dependency on the host framework.
 */

import * as fs from "node:fs";

export interface Wav {
  samples: Float64Array;
  sampleRate: number;
}

export function readWav(path: string): Wav {
  const blob = fs.readFileSync(path);
  if (blob.length < 12 || blob.toString("ascii", 0, 4) !== "RIFF" ||
      blob.toString("ascii", 8, 12) !== "WAVE") {
    throw new Error(`malformed WAV header: ${path}`);
  }

  let fmt: { codec: number; channels: number; sampleRate: number;
             bits: number } | null = null;
  let data: Buffer | null = null;
  let pos = 12;
  while (pos + 8 <= blob.length) {
    const id = blob.toString("ascii", pos, pos + 4);
    const size = blob.readUInt32LE(pos + 4);
    const body = blob.subarray(pos + 8, pos + 8 + size);
    if (id === "fmt ") {
      fmt = {
        codec: body.readUInt16LE(0),
        channels: body.readUInt16LE(2),
        sampleRate: body.readUInt32LE(4),
        bits: body.readUInt16LE(14),
      };
    } else if (id === "data") {
      data = Buffer.from(body);
    }
    pos += 8 + size + (size % 2); // chunks are word aligned
  }
  if (!fmt || !data) {
    throw new Error(`malformed WAV (missing fmt or data chunk): ${path}`);
  }

  let interleaved: Float64Array;
  if (fmt.codec === 1 && fmt.bits === 16) {
    const n = Math.floor(data.length / 2);
    interleaved = new Float64Array(n);
    for (let i = 0; i < n; i++) {
      interleaved[i] = data.readInt16LE(2 * i) / 32768;
    }
  } else if (fmt.codec === 3 && fmt.bits === 32) {
    const n = Math.floor(data.length / 4);
    interleaved = new Float64Array(n);
    for (let i = 0; i < n; i++) {
      interleaved[i] = data.readFloatLE(4 * i);
    }
  } else {
    throw new Error(
      `unsupported WAV codec (format tag ${fmt.codec}, ${fmt.bits}-bit): ${path}`);
  }

  if (fmt.channels <= 1) {
    return { samples: interleaved, sampleRate: fmt.sampleRate };
  }
  const frames = Math.floor(interleaved.length / fmt.channels);
  const mono = new Float64Array(frames);
  for (let f = 0; f < frames; f++) {
    let acc = 0;
    for (let c = 0; c < fmt.channels; c++) {
      acc += interleaved[f * fmt.channels + c];
    }
    mono[f] = acc / fmt.channels;
  }
  return { samples: mono, sampleRate: fmt.sampleRate };
}

/** Linear-interpolation resampling; reference quality is all we need. */
export function resampleLinear(x: Float64Array, srFrom: number,
                               srTo: number): Float64Array {
  if (srFrom === srTo) return x;
  const nOut = Math.ceil((x.length * srTo) / srFrom);
  const out = new Float64Array(nOut);
  const step = srFrom / srTo;
  for (let j = 0; j < nOut; j++) {
    const t = j * step;
    const i = Math.floor(t);
    const frac = t - i;
    const a = i < x.length ? x[i] : 0;
    const b = i + 1 < x.length ? x[i + 1] : 0;
    out[j] = a + frac * (b - a);
  }
  return out;
}
