import assert from "node:assert/strict";
import { test } from "node:test";

import {
  decodeGrid,
  encodeLabelGrid,
  encodeProbabilityGrid,
} from "../src/container";
import { BridgeError } from "../src/errors";

test("probability grid encode/decode round trip (f32 exact)", () => {
  // Dyadic values survive the f32 payload without rounding.
  const grid = { height: 1, width: 2, channels: 2, values: [0.25, 0.75, 0.5, 0.5] };
  const decoded = decodeGrid(encodeProbabilityGrid(grid));
  assert.equal(decoded.kind, "probability");
  if (decoded.kind === "probability") {
    assert.deepEqual(Array.from(decoded.values), grid.values);
    assert.equal(decoded.height, 1);
    assert.equal(decoded.width, 2);
    assert.equal(decoded.channels, 2);
  }
});

test("non-dyadic probabilities round to f32", () => {
  const grid = { height: 1, width: 1, channels: 2, values: [0.1, 0.9] };
  const decoded = decodeGrid(encodeProbabilityGrid(grid));
  if (decoded.kind === "probability") {
    assert.equal(decoded.values[0], Math.fround(0.1));
    assert.equal(decoded.values[1], Math.fround(0.9));
  }
});

test("label grid encode/decode round trip", () => {
  const labels = { height: 2, width: 2, values: new Uint16Array([0, 1, 65535, 7]) };
  const decoded = decodeGrid(encodeLabelGrid(labels));
  assert.equal(decoded.kind, "labels");
  if (decoded.kind === "labels") {
    assert.deepEqual(Array.from(decoded.values), [0, 1, 65535, 7]);
  }
});

test("bad magic is rejected with its core code", () => {
  const buf = Buffer.alloc(32);
  buf.write("NOTAGRID", 0, "ascii");
  assert.throws(
    () => decodeGrid(buf),
    (err: unknown) => err instanceof BridgeError && err.code === "BadMagic",
  );
});

test("truncated payload is rejected with its core code", () => {
  const full = encodeLabelGrid({ height: 2, width: 2, values: new Uint16Array(4) });
  assert.throws(
    () => decodeGrid(full.subarray(0, full.length - 3)),
    (err: unknown) => err instanceof BridgeError && err.code === "TruncatedPayload",
  );
});

test("value-count mismatch is rejected before encoding", () => {
  assert.throws(
    () => encodeProbabilityGrid({ height: 2, width: 2, channels: 2, values: [0.5, 0.5] }),
    (err: unknown) => err instanceof BridgeError && err.code === "InvariantViolation",
  );
});
