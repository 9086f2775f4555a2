/**
 * Binding layer for the conformalkit calibration core.
 *
 * No statistical logic lives here: fit/apply/score delegate to the core
 * through its CLI and file formats, and every value crosses the boundary
 * bit-exactly (containers carry raw payload bytes; thresholds and scores
 * travel as JSON doubles). Fitted state is owned by a handle that stays
 * valid until release().
 */

import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";

import {
  decodeGrid,
  encodeLabelGrid,
  encodeProbabilityGrid,
  LabelGrid,
  ProbabilityGrid,
} from "./container";
import { BridgeError, StaleHandleError } from "./errors";
import { CoreOptions, CoreProcess } from "./subprocess";

export { BridgeError, StaleHandleError } from "./errors";
export {
  decodeGrid,
  encodeLabelGrid,
  encodeProbabilityGrid,
  LabelGrid,
  ProbabilityGrid,
} from "./container";
export { CoreOptions } from "./subprocess";

export interface BoxRecord {
  id?: number;
  class?: number | null;
  confidence?: number | null;
  x_min: number;
  y_min: number;
  x_max: number;
  y_max: number;
}

export interface DetectionDocument {
  boxes: BoxRecord[];
}

export interface TraceStep {
  probs: number[];
  vocab_size: number;
  tail_mass?: number;
}

export type ThresholdDocument =
  | { kind: "seg"; alpha: number; q: number | "inf"; n: number }
  | { kind: "det"; alpha: number; tau: number; q: (number | "inf")[]; counts: number[] };

/** Opaque reference to fitted threshold state owned by the core. */
export class Handle {
  readonly kind: "seg" | "det";
  /** Threshold document as fitted (infinite quantiles appear as "inf"). */
  readonly document: ThresholdDocument;
  private readonly file: string;
  private readonly dir: string;
  private released = false;

  constructor(kind: "seg" | "det", document: ThresholdDocument, file: string, dir: string) {
    this.kind = kind;
    this.document = document;
    this.file = file;
    this.dir = dir;
  }

  /** Path of the threshold JSON backing this handle. */
  thresholdPath(): string {
    this.assertLive();
    return this.file;
  }

  assertLive(): void {
    if (this.released) {
      throw new StaleHandleError("handle was released");
    }
  }

  release(): void {
    this.assertLive();
    this.released = true;
    fs.rmSync(this.dir, { recursive: true, force: true });
  }
}

function asJsonNumber(v: number | "inf"): number {
  return v === "inf" ? Infinity : v;
}

export class CoreBridge {
  private readonly core: CoreProcess;

  constructor(options: CoreOptions = {}) {
    this.core = new CoreProcess(options);
  }

  private tempDir(prefix: string): string {
    return fs.mkdtempSync(path.join(os.tmpdir(), prefix));
  }

  /**
   * Fit the pixel-wise segmentation threshold.
   *
   * Grids and label maps are parallel arrays (one entry per calibration
   * image); the returned handle wraps exactly the threshold the core
   * persists, value-identical to a core-side fit on equal inputs.
   */
  fitSeg(grids: ProbabilityGrid[], labels: LabelGrid[], alpha: number): Handle {
    if (grids.length === 0 || grids.length !== labels.length) {
      throw new BridgeError(
        grids.length === 0 ? "EmptyCalibrationSet" : "DimensionMismatch",
        `got ${grids.length} grids and ${labels.length} label maps`,
      );
    }
    const dir = this.tempDir("ck-fitseg-");
    try {
      const calib = path.join(dir, "calib");
      fs.mkdirSync(calib);
      grids.forEach((grid, i) => {
        fs.writeFileSync(path.join(calib, `img${i}_probs.grid`), encodeProbabilityGrid(grid));
        fs.writeFileSync(path.join(calib, `img${i}_labels.grid`), encodeLabelGrid(labels[i]));
      });
      const handleDir = this.tempDir("ck-handle-");
      const out = path.join(handleDir, "threshold.json");
      this.core.run(["seg", "fit", "--alpha", String(alpha), "--calib", calib, "--out", out]);
      const doc = JSON.parse(fs.readFileSync(out, "utf8")) as ThresholdDocument;
      return new Handle("seg", doc, out, handleDir);
    } finally {
      fs.rmSync(dir, { recursive: true, force: true });
    }
  }

  /** Fit the per-side detection quantiles from per-image (pred, gt) pairs. */
  fitDet(
    images: { predictions: DetectionDocument; truths: DetectionDocument }[],
    alpha: number,
    tau = 0.5,
  ): Handle {
    if (images.length === 0) {
      throw new BridgeError("EmptyCalibrationSet", "no calibration images supplied");
    }
    const dir = this.tempDir("ck-fitdet-");
    try {
      const calib = path.join(dir, "calib");
      fs.mkdirSync(calib);
      images.forEach((image, i) => {
        fs.writeFileSync(path.join(calib, `img${i}_pred.json`), JSON.stringify(image.predictions));
        fs.writeFileSync(path.join(calib, `img${i}_gt.json`), JSON.stringify(image.truths));
      });
      const handleDir = this.tempDir("ck-handle-");
      const out = path.join(handleDir, "threshold.json");
      this.core.run([
        "det", "fit", "--alpha", String(alpha), "--tau", String(tau),
        "--calib", calib, "--out", out,
      ]);
      const doc = JSON.parse(fs.readFileSync(out, "utf8")) as ThresholdDocument;
      return new Handle("det", doc, out, handleDir);
    } finally {
      fs.rmSync(dir, { recursive: true, force: true });
    }
  }

  /**
   * Wrap an existing fitted-threshold document in a handle (the document
   * format is the core's human-auditable threshold JSON).
   */
  loadThreshold(document: ThresholdDocument): Handle {
    const handleDir = this.tempDir("ck-handle-");
    const out = path.join(handleDir, "threshold.json");
    fs.writeFileSync(out, JSON.stringify(document) + "\n");
    return new Handle(document.kind, document, out, handleDir);
  }

  /** Calibrate one probability grid into a label map (segmentation handle). */
  applySeg(handle: Handle, grid: ProbabilityGrid): { height: number; width: number; values: Uint16Array } {
    handle.assertLive();
    if (handle.kind !== "seg") {
      throw new BridgeError("InvariantViolation", "applySeg needs a segmentation handle");
    }
    const dir = this.tempDir("ck-apply-");
    try {
      const gridPath = path.join(dir, "input.grid");
      const outPath = path.join(dir, "labels.grid");
      fs.writeFileSync(gridPath, encodeProbabilityGrid(grid));
      this.core.run([
        "seg", "apply", "--threshold", handle.thresholdPath(),
        "--grid", gridPath, "--out", outPath,
      ]);
      const decoded = decodeGrid(fs.readFileSync(outPath));
      if (decoded.kind !== "labels") {
        throw new BridgeError("InvariantViolation", `core wrote a ${decoded.kind} container`);
      }
      return { height: decoded.height, width: decoded.width, values: decoded.values };
    } finally {
      fs.rmSync(dir, { recursive: true, force: true });
    }
  }

  /** Expand every box of a detection document (detection handle). */
  applyDet(handle: Handle, detections: DetectionDocument, bounds?: [number, number]): DetectionDocument {
    handle.assertLive();
    if (handle.kind !== "det") {
      throw new BridgeError("InvariantViolation", "applyDet needs a detection handle");
    }
    const dir = this.tempDir("ck-apply-");
    try {
      const inPath = path.join(dir, "detections.json");
      const outPath = path.join(dir, "calibrated.json");
      fs.writeFileSync(inPath, JSON.stringify(detections));
      const args = [
        "det", "apply", "--threshold", handle.thresholdPath(),
        "--detections", inPath, "--out", outPath,
      ];
      if (bounds) {
        args.push("--bounds", String(bounds[0]), String(bounds[1]));
      }
      this.core.run(args);
      return JSON.parse(fs.readFileSync(outPath, "utf8")) as DetectionDocument;
    } finally {
      fs.rmSync(dir, { recursive: true, force: true });
    }
  }

  /** Dispatch on the handle kind. */
  apply(handle: Handle, input: ProbabilityGrid | DetectionDocument): unknown {
    return handle.kind === "seg"
      ? this.applySeg(handle, input as ProbabilityGrid)
      : this.applyDet(handle, input as DetectionDocument);
  }

  /** Score one answer trace; returns the uncertainty value. */
  score(trace: TraceStep[], options: { p?: number; method?: "top_p" | "entropy" } = {}): number {
    const dir = this.tempDir("ck-score-");
    try {
      const tracePath = path.join(dir, "trace.jsonl");
      fs.writeFileSync(tracePath, trace.map((step) => JSON.stringify(step)).join("\n") + "\n");
      const args = ["uq", "score", "--trace", tracePath];
      if (options.p !== undefined) {
        args.push("--p", String(options.p));
      }
      if (options.method !== undefined) {
        args.push("--method", options.method);
      }
      const doc = this.core.run(args);
      return doc.value as number;
    } finally {
      fs.rmSync(dir, { recursive: true, force: true });
    }
  }

  /** Quantile value of a handle as a number (+inf decoded). */
  static quantile(handle: Handle): number | number[] {
    const doc = handle.document;
    return doc.kind === "seg" ? asJsonNumber(doc.q) : doc.q.map(asJsonNumber);
  }
}
