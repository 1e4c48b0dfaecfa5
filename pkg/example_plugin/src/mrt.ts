/**
 * MRT1 tensor files (little-endian):
 * magic "MRT1" | dtype u8 (1 = f32le) | ndim u8 | dims u32 x ndim |
 * row-major f32 payload.
 */

import * as fs from "node:fs";

export function writeMrt(path: string, rows: Float64Array[],
                         width: number): void {
  const header = Buffer.alloc(4 + 1 + 1 + 4 * 2);
  header.write("MRT1", 0, "ascii");
  header.writeUInt8(1, 4); // f32le
  header.writeUInt8(2, 5); // ndim
  header.writeUInt32LE(rows.length, 6);
  header.writeUInt32LE(width, 10);

  const payload = Buffer.alloc(4 * rows.length * width);
  rows.forEach((row, r) => {
    for (let c = 0; c < width; c++) {
      payload.writeFloatLE(row[c], 4 * (r * width + c));
    }
  });
  fs.writeFileSync(path, Buffer.concat([header, payload]));
}

export interface Mrt {
  dims: number[];
  data: Float32Array;
}

/** Reader used only by the plugin's own tests. */
export function readMrt(path: string): Mrt {
  const blob = fs.readFileSync(path);
  if (blob.toString("ascii", 0, 4) !== "MRT1") {
    throw new Error(`bad magic in ${path}`);
  }
  if (blob.readUInt8(4) !== 1) {
    throw new Error(`unsupported dtype tag in ${path}`);
  }
  const ndim = blob.readUInt8(5);
  const dims: number[] = [];
  for (let d = 0; d < ndim; d++) {
    dims.push(blob.readUInt32LE(6 + 4 * d));
  }
  const count = dims.reduce((a, b) => a * b, 1);
  const start = 6 + 4 * ndim;
  if (blob.length !== start + 4 * count) {
    throw new Error(`truncated payload in ${path}`);
  }
  const data = new Float32Array(count);
  for (let i = 0; i < count; i++) {
    data[i] = blob.readFloatLE(start + 4 * i);
  }
  return { dims, data };
}
