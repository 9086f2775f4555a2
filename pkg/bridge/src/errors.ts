/**
 * Error translation.
 *
 * The core CLI reports failures as `{"error": code, "message": ...}` on
 * stderr with exit status 2; the bridge rethrows them with the same code
 * string, one-to-one, so callers can switch on `err.code` exactly as core
 * callers switch on exception classes.
 */

export class BridgeError extends Error {
  readonly code: string;

  constructor(code: string, message: string) {
    super(`${code}: ${message}`);
    this.name = "BridgeError";
    this.code = code;
  }
}

/** Thrown when a handle is used after release (bridge-level lifecycle). */
export class StaleHandleError extends BridgeError {
  constructor(message: string) {
    super("StaleHandle", message);
    this.name = "StaleHandleError";
  }
}

export function errorFromStderr(stderr: string, status: number | null): BridgeError {
  const lines = stderr.trim().split("\n");
  for (let i = lines.length - 1; i >= 0; i--) {
    const line = lines[i].trim();
    if (!line.startsWith("{")) continue;
    try {
      const doc = JSON.parse(line);
      if (typeof doc.error === "string") {
        return new BridgeError(doc.error, String(doc.message ?? ""));
      }
    } catch {
      // fall through to the generic error below
    }
  }
  return new BridgeError(
    "AdapterFailure",
    `core exited with status ${status}: ${stderr.trim().slice(-400)}`,
  );
}
