import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";

import { describe, expect, it } from "vitest";

import { readMrt } from "../src/mrt";
import { main } from "../src/plugin";
import { readWav } from "../src/wav";
import { sine, writeTestWav } from "./helpers";

function setup(): string {
  return fs.mkdtempSync(path.join(os.tmpdir(), "plugin-"));
}

function writeManifest(dir: string,
                       rows: Record<string, unknown>[]): string {
  const p = path.join(dir, "manifest.jsonl");
  fs.writeFileSync(p, rows.map((r) => JSON.stringify(r)).join("\n") + "\n");
  return p;
}

describe("wav reader", () => {
  it("reads PCM16 mono", () => {
    const dir = setup();
    const p = path.join(dir, "a.wav");
    writeTestWav(p, [0.5, -0.25, 0.0], 8000);
    const wav = readWav(p);
    expect(wav.sampleRate).toBe(8000);
    expect(wav.samples[0]).toBeCloseTo(0.5, 3);
    expect(wav.samples[1]).toBeCloseTo(-0.25, 3);
  });

  it("averages stereo to mono", () => {
    const dir = setup();
    const p = path.join(dir, "st.wav");
    writeTestWav(p, [1.0, 0.0, 1.0, 0.0], 8000, 2);
    const wav = readWav(p);
    expect(wav.samples.length).toBe(2);
    expect(wav.samples[0]).toBeCloseTo(0.5, 3);
  });

  it("rejects junk", () => {
    const dir = setup();
    const p = path.join(dir, "junk.wav");
    fs.writeFileSync(p, Buffer.from("not audio at all, sorry"));
    expect(() => readWav(p)).toThrow(/malformed/);
  });
});

describe("plugin main", () => {
  it("writes one MRT1 per track with consistent width", () => {
    const dir = setup();
    const out = path.join(dir, "out");
    for (const [name, freq] of [["a", 440], ["b", 1200]] as const) {
      writeTestWav(path.join(dir, `${name}.wav`), sine(freq, 1.0, 16000), 16000);
    }
    const manifest = writeManifest(dir, [
      { track_id: "a", audio_path: path.join(dir, "a.wav"),
        window_s: 0.5, hop_s: 0.5, target_sr: 16000 },
      { track_id: "b", audio_path: path.join(dir, "b.wav"),
        window_s: 0.5, hop_s: 0.5, target_sr: 16000 },
    ]);
    expect(main(["--manifest", manifest, "--outdir", out])).toBe(0);
    const a = readMrt(path.join(out, "a.mrt"));
    const b = readMrt(path.join(out, "b.mrt"));
    expect(a.dims).toEqual([2, 32]);
    expect(b.dims).toEqual([2, 32]);
  });

  it("windows a 9 s track into [3, 32] at window_s = hop_s = 3", () => {
    const dir = setup();
    const out = path.join(dir, "out");
    writeTestWav(path.join(dir, "long.wav"), sine(500, 9.0, 8000), 8000);
    const manifest = writeManifest(dir, [
      { track_id: "long", audio_path: path.join(dir, "long.wav"),
        window_s: 3.0, hop_s: 3.0, target_sr: 8000 },
    ]);
    expect(main(["--manifest", manifest, "--outdir", out])).toBe(0);
    expect(readMrt(path.join(out, "long.mrt")).dims).toEqual([3, 32]);
  });

  it("resamples when the file rate differs from target_sr", () => {
    const dir = setup();
    const out = path.join(dir, "out");
    writeTestWav(path.join(dir, "hi.wav"), sine(440, 1.0, 48000), 48000);
    const manifest = writeManifest(dir, [
      { track_id: "hi", audio_path: path.join(dir, "hi.wav"),
        window_s: 1.0, hop_s: 1.0, target_sr: 16000 },
    ]);
    expect(main(["--manifest", manifest, "--outdir", out])).toBe(0);
    expect(readMrt(path.join(out, "hi.mrt")).dims).toEqual([1, 32]);
  });

  it("exits 1 naming the track on unreadable audio", () => {
    const dir = setup();
    const out = path.join(dir, "out");
    const bad = path.join(dir, "corrupt.wav");
    fs.writeFileSync(bad, Buffer.from("RIFFgarbage"));
    const manifest = writeManifest(dir, [
      { track_id: "broken", audio_path: bad,
        window_s: 1.0, hop_s: 1.0, target_sr: 16000 },
    ]);
    const chunks: string[] = [];
    const original = process.stderr.write.bind(process.stderr);
    (process.stderr as any).write = (s: string) => {
      chunks.push(String(s));
      return true;
    };
    try {
      expect(main(["--manifest", manifest, "--outdir", out])).toBe(1);
    } finally {
      (process.stderr as any).write = original;
    }
    expect(chunks.join("")).toContain("broken");
  });
});
