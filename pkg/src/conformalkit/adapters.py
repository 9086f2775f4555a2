"""Built-in synthetic adapters for the pipeline's subprocess protocol.

An adapter is an executable that reads one JSON request document from stdin
and writes one JSON response document to stdout. These reference adapters
are deterministic given their --seed and are stdlib-only, so each invocation
starts fast; run them as ``python -m conformalkit.adapters <mode> ...``.

Modes
-----
seg-oracle      seeded probability-grid generator; replies {"grid": path}
det-oracle      seeded box generator; replies a detection-list document
reason-oracle   seeded stand-in for the reasoning model (RoI pick + answer)
reason-scripted replies looked up from a fixture file by request fields
fail            exits non-zero or emits malformed output (for tests)
"""

from __future__ import annotations

import argparse
import hashlib
import json
import random
import struct
import sys


def _read_request() -> dict:
    doc = json.loads(sys.stdin.read())
    if not isinstance(doc, dict):
        raise ValueError("request must be a JSON object")
    return doc


def _reply(doc: dict) -> None:
    sys.stdout.write(json.dumps(doc))
    sys.stdout.write("\n")


def _pnm_dims(path: str) -> tuple:
    with open(path, "rb") as handle:
        raw = handle.read(512)
    if raw[:2] not in (b"P5", b"P6"):
        raise ValueError(f"{path} is not a binary PGM/PPM image")
    fields = []
    pos = 2
    while len(fields) < 2:
        while pos < len(raw) and raw[pos] in b" \t\r\n":
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos] not in b" \t\r\n":
            pos += 1
        fields.append(int(raw[start:pos]))
    width, height = fields
    return height, width


def _derive_rng(seed: int, *context) -> random.Random:
    key = ":".join(str(c) for c in (seed,) + context)
    digest = hashlib.sha256(key.encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "little"))


def _write_prob_container(path: str, probs, height: int, width: int, channels: int) -> None:
    header = b"CPGRID01" + bytes([0]) + struct.pack("<III", height, width, channels)
    payload = struct.pack(f"<{len(probs)}f", *probs)
    with open(path, "wb") as handle:
        handle.write(header + payload)


def run_seg_oracle(args, request: dict) -> dict:
    """Generate a grid with rectangular objects over a background-heavy base.

    Object rims get a near-tie between background and the object class, the
    regime where conformal relabeling visibly rescues foreground pixels.
    """
    height, width = _pnm_dims(request["image"])
    classes = args.classes  # foreground classes; channel count is classes + 1
    rng = _derive_rng(args.seed, "seg", request.get("pathway_id", ""))
    cells = [[0] * (classes + 1) for _ in range(height * width)]

    def set_pixel(y, x, fg_class, fg_p, bg_p):
        rest = (1.0 - fg_p - bg_p) / max(classes - 1, 1)
        vec = [bg_p] + [rest] * classes
        vec[fg_class] = fg_p
        cells[y * width + x] = vec

    for y in range(height):
        for x in range(width):
            set_pixel(y, x, 1, 0.18 / classes, 0.82)
    blob_count = max(1, min(args.objects, (height // 4) * (width // 4)))
    for _ in range(blob_count):
        bw = rng.randint(2, max(2, width // 3))
        bh = rng.randint(2, max(2, height // 3))
        x0 = rng.randint(0, width - bw)
        y0 = rng.randint(0, height - bh)
        fg = rng.randint(1, classes)
        for y in range(y0, y0 + bh):
            for x in range(x0, x0 + bw):
                on_rim = y in (y0, y0 + bh - 1) or x in (x0, x0 + bw - 1)
                if on_rim:
                    set_pixel(y, x, fg, 0.42, 0.46)
                else:
                    set_pixel(y, x, fg, 0.70, 0.20)
    flat = [v for cell in cells for v in cell]
    out = f"{request['output_dir']}/{request.get('pathway_id', 'seg')}_tool_probs.grid"
    _write_prob_container(out, flat, height, width, classes + 1)
    return {"grid": out}


def run_det_oracle(args, request: dict) -> dict:
    height, width = _pnm_dims(request["image"])
    rng = _derive_rng(args.seed, "det", request.get("pathway_id", ""))
    boxes = []
    for i in range(args.objects):
        w = rng.uniform(max(2.0, width / 6), max(3.0, width / 3))
        h = rng.uniform(max(2.0, height / 6), max(3.0, height / 3))
        x = rng.uniform(0, max(1e-6, width - w))
        y = rng.uniform(0, max(1e-6, height - h))
        boxes.append(
            {
                "id": i,
                "class": rng.randint(1, args.classes),
                "confidence": round(rng.uniform(0.5, 0.99), 4),
                "x_min": round(x, 2),
                "y_min": round(y, 2),
                "x_max": round(x + w, 2),
                "y_max": round(y + h, 2),
            }
        )
    return {"boxes": boxes}


def _report_ids(request: dict) -> list:
    report = request.get("report", {})
    entries = report.get("objects") or report.get("boxes") or []
    return [e["id"] for e in entries]


def _synthetic_trace(rng: random.Random, steps: int) -> list:
    trace = []
    for _ in range(steps):
        vocab = rng.randint(6, 14)
        weights = sorted((rng.expovariate(1.0) for _ in range(vocab)), reverse=True)
        total = sum(weights)
        probs = [w / total for w in weights]
        trace.append({"probs": probs, "vocab_size": vocab, "tail_mass": 0.0})
    return trace


def run_reason_oracle(args, request: dict) -> dict:
    rng = _derive_rng(args.seed, "reason", request.get("pathway_id", ""), request.get("op", ""))
    if request.get("op") == "select_roi":
        ids = _report_ids(request)
        if not ids:
            return {"text": "the report lists no objects: []"}
        take = ids[: max(1, min(args.select, len(ids)))]
        return {"text": f"the question points at object ids {json.dumps(take)}"}
    trace = _synthetic_trace(rng, args.steps)
    pathway = request.get("pathway_id", "unknown")
    return {"text": f"synthetic answer via {pathway}", "trace": trace}


def run_reason_scripted(args, request: dict) -> dict:
    with open(args.script) as handle:
        script = json.load(handle)
    for entry in script.get("replies", []):
        match = entry.get("match", {})
        if all(request.get(k) == v for k, v in match.items()):
            return entry["response"]
    raise SystemExit(f"no scripted reply matches request op={request.get('op')!r} "
                     f"pathway={request.get('pathway_id')!r}")


def run_fail(args, request: dict) -> dict:
    if args.malformed:
        sys.stdout.write("this is not json {")
        sys.exit(0)
    sys.stderr.write("synthetic adapter failure\n")
    sys.exit(args.exit_code)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conformalkit.adapters", description=__doc__)
    sub = parser.add_subparsers(dest="mode", required=True)

    seg = sub.add_parser("seg-oracle")
    seg.add_argument("--seed", type=int, default=0)
    seg.add_argument("--classes", type=int, default=3)
    seg.add_argument("--objects", type=int, default=3)
    seg.set_defaults(run=run_seg_oracle)

    det = sub.add_parser("det-oracle")
    det.add_argument("--seed", type=int, default=0)
    det.add_argument("--classes", type=int, default=3)
    det.add_argument("--objects", type=int, default=3)
    det.set_defaults(run=run_det_oracle)

    reason = sub.add_parser("reason-oracle")
    reason.add_argument("--seed", type=int, default=0)
    reason.add_argument("--steps", type=int, default=6)
    reason.add_argument("--select", type=int, default=1, help="how many leading ids to pick")
    reason.set_defaults(run=run_reason_oracle)

    scripted = sub.add_parser("reason-scripted")
    scripted.add_argument("--script", required=True)
    scripted.set_defaults(run=run_reason_scripted)

    fail = sub.add_parser("fail")
    fail.add_argument("--exit-code", type=int, default=3)
    fail.add_argument("--malformed", action="store_true")
    fail.set_defaults(run=run_fail)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    request = _read_request()
    _reply(args.run(args, request))
    return 0


if __name__ == "__main__":
    sys.exit(main())
