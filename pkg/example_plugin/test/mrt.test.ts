import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";

import { describe, expect, it } from "vitest";

import { readMrt, writeMrt } from "../src/mrt";

function tmpFile(name: string): string {
  const dir = fs.mkdtempSync(path.join(os.tmpdir(), "mrt-"));
  return path.join(dir, name);
}

describe("MRT1 files", () => {
  it("writes the documented byte layout", () => {
    const p = tmpFile("one.mrt");
    writeMrt(p, [new Float64Array([0.5])], 1);
    const blob = fs.readFileSync(p);
    // magic(4) + dtype(1) + ndim(1) + two u32 dims(8) = 14 header bytes
    expect(blob.length).toBe(14 + 4);
    expect(blob.toString("ascii", 0, 4)).toBe("MRT1");
    expect(blob.readUInt8(4)).toBe(1);
    expect(blob.readUInt8(5)).toBe(2);
    expect(blob.readUInt32LE(6)).toBe(1);
    expect(blob.readUInt32LE(10)).toBe(1);
    expect(blob.readFloatLE(14)).toBeCloseTo(0.5, 8);
  });

  it("round-trips a matrix", () => {
    const p = tmpFile("m.mrt");
    const rows = [new Float64Array([1, -2, 3.5]),
                  new Float64Array([0.25, 0, -1])];
    writeMrt(p, rows, 3);
    const back = readMrt(p);
    expect(back.dims).toEqual([2, 3]);
    expect(Array.from(back.data)).toEqual([1, -2, 3.5, 0.25, 0, -1]);
  });

  it("rejects a bad magic", () => {
    const p = tmpFile("bad.mrt");
    fs.writeFileSync(p, Buffer.from("XXXXxxxxxxxxxxxxxx"));
    expect(() => readMrt(p)).toThrow(/bad magic/);
  });
});
