import * as fs from "node:fs";

/** PCM16 WAV writer for test fixtures. */
export function writeTestWav(path: string, samples: number[] | Float64Array,
                             sampleRate: number, channels = 1): void {
  const n = samples.length;
  const payload = Buffer.alloc(2 * n);
  for (let i = 0; i < n; i++) {
    const v = Math.max(-1, Math.min(1, samples[i]));
    payload.writeInt16LE(Math.round(v * 32767), 2 * i);
  }
  const header = Buffer.alloc(44);
  header.write("RIFF", 0, "ascii");
  header.writeUInt32LE(36 + payload.length, 4);
  header.write("WAVE", 8, "ascii");
  header.write("fmt ", 12, "ascii");
  header.writeUInt32LE(16, 16);
  header.writeUInt16LE(1, 20); // PCM
  header.writeUInt16LE(channels, 22);
  header.writeUInt32LE(sampleRate, 24);
  header.writeUInt32LE(sampleRate * 2 * channels, 28);
  header.writeUInt16LE(2 * channels, 32);
  header.writeUInt16LE(16, 34);
  header.write("data", 36, "ascii");
  header.writeUInt32LE(payload.length, 40);
  fs.writeFileSync(path, Buffer.concat([header, payload]));
}

export function sine(freq: number, seconds: number,
                     sampleRate: number, amp = 0.5): Float64Array {
  const n = Math.round(seconds * sampleRate);
  const out = new Float64Array(n);
  for (let i = 0; i < n; i++) {
    out[i] = amp * Math.sin((2 * Math.PI * freq * i) / sampleRate);
  }
  return out;
}
