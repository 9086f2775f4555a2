/**
 * Grid-container codec (marshalling only; all statistics stay core-side).
 *
 * Layout: 8-byte magic "CPGRID01", 1 kind byte (0 probability f32,
 * 1 labels u16, 2 scores f64), three little-endian u32 dims (H, W, C),
 * then the row-major little-endian payload.
 */

import { BridgeError } from "./errors";

export const MAGIC = "CPGRID01";
const HEADER_SIZE = 8 + 1 + 12;

export interface ProbabilityGrid {
  height: number;
  width: number;
  /** classes including background */
  channels: number;
  /** row-major H*W*channels values */
  values: Float64Array | number[];
}

export interface LabelGrid {
  height: number;
  width: number;
  /** row-major H*W labels */
  values: Uint16Array;
}

function header(kind: number, h: number, w: number, c: number): Buffer {
  const buf = Buffer.alloc(HEADER_SIZE);
  buf.write(MAGIC, 0, "ascii");
  buf.writeUInt8(kind, 8);
  buf.writeUInt32LE(h, 9);
  buf.writeUInt32LE(w, 13);
  buf.writeUInt32LE(c, 17);
  return buf;
}

export function encodeProbabilityGrid(grid: ProbabilityGrid): Buffer {
  const { height, width, channels, values } = grid;
  const count = height * width * channels;
  if (values.length !== count) {
    throw new BridgeError(
      "InvariantViolation",
      `grid declares ${count} values but carries ${values.length}`,
    );
  }
  const payload = Buffer.alloc(count * 4);
  for (let i = 0; i < count; i++) {
    payload.writeFloatLE(values[i] as number, i * 4);
  }
  return Buffer.concat([header(0, height, width, channels), payload]);
}

export function encodeLabelGrid(grid: LabelGrid): Buffer {
  const { height, width, values } = grid;
  const count = height * width;
  if (values.length !== count) {
    throw new BridgeError(
      "InvariantViolation",
      `label grid declares ${count} values but carries ${values.length}`,
    );
  }
  const payload = Buffer.alloc(count * 2);
  for (let i = 0; i < count; i++) {
    payload.writeUInt16LE(values[i], i * 2);
  }
  return Buffer.concat([header(1, height, width, 1), payload]);
}

export type DecodedGrid =
  | { kind: "probability"; height: number; width: number; channels: number; values: Float32Array }
  | { kind: "labels"; height: number; width: number; values: Uint16Array }
  | { kind: "scores"; values: Float64Array };

export function decodeGrid(raw: Buffer): DecodedGrid {
  if (raw.length < HEADER_SIZE || raw.toString("ascii", 0, 8) !== MAGIC) {
    throw new BridgeError("BadMagic", "buffer is not a grid container");
  }
  const kind = raw.readUInt8(8);
  const h = raw.readUInt32LE(9);
  const w = raw.readUInt32LE(13);
  const c = raw.readUInt32LE(17);
  const itemSize = kind === 0 ? 4 : kind === 1 ? 2 : 8;
  const expected = h * w * c * itemSize;
  const body = raw.subarray(HEADER_SIZE);
  if (body.length < expected) {
    throw new BridgeError(
      "TruncatedPayload",
      `payload is ${body.length} bytes, header declares ${expected}`,
    );
  }
  if (body.length > expected) {
    throw new BridgeError("InvariantViolation", `${body.length - expected} trailing bytes`);
  }
  // Copy out of the file buffer so byteOffset alignment never leaks.
  const bytes = Uint8Array.prototype.slice.call(body);
  if (kind === 0) {
    return { kind: "probability", height: h, width: w, channels: c, values: new Float32Array(bytes.buffer) };
  }
  if (kind === 1) {
    return { kind: "labels", height: h, width: w, values: new Uint16Array(bytes.buffer) };
  }
  if (kind === 2) {
    return { kind: "scores", values: new Float64Array(bytes.buffer) };
  }
  throw new BridgeError("InvariantViolation", `unknown container kind ${kind}`);
}
