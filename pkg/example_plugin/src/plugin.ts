/**
 * Reference external feature extractor.
 *
 * Protocol: invoked as
 *   node plugin.js --manifest <jsonl> --outdir <dir>
 * where each manifest line is {"track_id", "audio_path", "window_s",
 * "hop_s", "target_sr"}. For every track it writes <outdir>/<track_id>.mrt
 * with shape [n_windows, 32]: 32 log-spaced band energies per analysis
 * window, n_windows = ceil(n_samples / hop_samples) with a zero-padded
 * tail. Exits 0 on success, 1 with the failing track named on stderr.
 */

import * as fs from "node:fs";
import * as path from "node:path";

import { N_BANDS, bandEmbedding } from "./dsp";
import { writeMrt } from "./mrt";
import { readWav, resampleLinear } from "./wav";

interface ManifestRow {
  track_id: string;
  audio_path: string;
  window_s: number;
  hop_s: number;
  target_sr: number;
}

function parseArgs(argv: string[]): { manifest: string; outdir: string } {
  let manifest = "";
  let outdir = "";
  for (let i = 0; i < argv.length; i++) {
    if (argv[i] === "--manifest") manifest = argv[++i];
    else if (argv[i] === "--outdir") outdir = argv[++i];
    else throw new Error(`unknown argument ${argv[i]}`);
  }
  if (!manifest || !outdir) {
    throw new Error("usage: plugin --manifest <jsonl> --outdir <dir>");
  }
  return { manifest, outdir };
}

export function extractTrack(row: ManifestRow, outdir: string): void {
  const wav = readWav(row.audio_path);
  const samples = resampleLinear(wav.samples, wav.sampleRate, row.target_sr);
  const windowLen = Math.round(row.window_s * row.target_sr);
  const hopLen = Math.round(row.hop_s * row.target_sr);
  const nWindows = Math.max(1, Math.ceil(samples.length / hopLen));

  const rows: Float64Array[] = [];
  for (let w = 0; w < nWindows; w++) {
    const chunk = new Float64Array(windowLen);
    const src = samples.subarray(w * hopLen,
                                 Math.min(w * hopLen + windowLen,
                                          samples.length));
    chunk.set(src);
    rows.push(bandEmbedding(chunk, row.target_sr));
  }
  writeMrt(path.join(outdir, `${row.track_id}.mrt`), rows, N_BANDS);
}

export function main(argv: string[]): number {
  const { manifest, outdir } = parseArgs(argv);
  fs.mkdirSync(outdir, { recursive: true });
  const lines = fs.readFileSync(manifest, "utf-8").split("\n");
  for (const line of lines) {
    if (!line.trim()) continue;
    const row = JSON.parse(line) as ManifestRow;
    try {
      extractTrack(row, outdir);
    } catch (err) {
      process.stderr.write(
        `track ${row.track_id}: ${err instanceof Error ? err.message : err}\n`);
      return 1;
    }
  }
  return 0;
}

if (require.main === module) {
  try {
    process.exit(main(process.argv.slice(2)));
  } catch (err) {
    process.stderr.write(`${err instanceof Error ? err.message : err}\n`);
    process.exit(2);
  }
}
