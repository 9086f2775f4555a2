/**
 * Synchronous transport to the core CLI.
 *
 * Every call is one `python -m conformalkit.cli <args>` invocation; stdout
 * is a single JSON document, failures arrive as exit status 2 plus a JSON
 * error document on stderr (translated in errors.ts).
 */

import { spawnSync } from "node:child_process";
import * as path from "node:path";

import { BridgeError, errorFromStderr } from "./errors";

export interface CoreOptions {
  /** Python interpreter (default "python3"). */
  python?: string;
  /** Directory holding the conformalkit package; prepended to PYTHONPATH. */
  pythonPath?: string;
  /** Per-invocation timeout in milliseconds (default 120000). */
  timeoutMs?: number;
}

export class CoreProcess {
  private readonly python: string;
  private readonly env: NodeJS.ProcessEnv;
  private readonly timeoutMs: number;

  constructor(options: CoreOptions = {}) {
    this.python = options.python ?? process.env.CONFORMALKIT_PYTHON ?? "python3";
    this.timeoutMs = options.timeoutMs ?? 120000;
    const extra = options.pythonPath ?? process.env.CONFORMALKIT_PYTHONPATH;
    this.env = { ...process.env };
    if (extra) {
      const current = this.env.PYTHONPATH;
      this.env.PYTHONPATH = current ? `${extra}${path.delimiter}${current}` : extra;
    }
  }

  /** Run one CLI subcommand and parse its stdout JSON document. */
  run(args: string[]): any {
    const proc = spawnSync(this.python, ["-m", "conformalkit.cli", ...args], {
      env: this.env,
      timeout: this.timeoutMs,
      maxBuffer: 64 * 1024 * 1024,
      encoding: "utf8",
    });
    if (proc.error) {
      throw new BridgeError("AdapterFailure", `cannot run ${this.python}: ${proc.error.message}`);
    }
    if (proc.status !== 0) {
      throw errorFromStderr(proc.stderr ?? "", proc.status);
    }
    try {
      return JSON.parse(proc.stdout);
    } catch (exc) {
      throw new BridgeError("AdapterFailure", `core printed malformed JSON: ${exc}`);
    }
  }
}
