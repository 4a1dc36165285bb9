"""Pure-software worker speaking the execution wire protocol.

Lets the whole host-side stack run without Blender: scripts execute with
plain ``exec`` in a persistent namespace, renders write tiny placeholder
PNGs, and the scene bounding box is whatever the last script assigned to the
``SCENE_BBOX`` variable (a [[min],[max]] pair), so fixtures can drive the
camera planner.

Fault injection for supervisor tests is triggered by magic comments anywhere
in an exec payload:

    # fault: malformed     emit a non-JSON line instead of the response
    # fault: wrong-id      respond with a mismatched request id
    # fault: crash         exit mid-request without responding
    # fault: hang          sleep far past any sane timeout

This file is deliberately self-contained (stdlib only): it runs as a plain
script, never as part of the package.
"""

from __future__ import annotations

import io
import json
import os
import struct
import sys
import time
import traceback
import zlib
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path

VERSION = "fake-worker/1 (python {}.{}.{})".format(*sys.version_info[:3])

_ZERO_BBOX = [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]


def _png_bytes(width: int = 4, height: int = 4, gray: int = 128) -> bytes:
    """A minimal valid grayscale PNG, deterministic byte-for-byte."""
    def chunk(tag: bytes, data: bytes) -> bytes:
        return (
            struct.pack(">I", len(data))
            + tag
            + data
            + struct.pack(">I", zlib.crc32(tag + data) & 0xFFFFFFFF)
        )

    header = struct.pack(">IIBBBBB", width, height, 8, 0, 0, 0, 0)
    raw = b"".join(b"\x00" + bytes([gray]) * width for _ in range(height))
    return (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", header)
        + chunk(b"IDAT", zlib.compress(raw, 9))
        + chunk(b"IEND", b"")
    )


def _emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":")) + "\n")
    sys.stdout.flush()


def _response(req_id: int, ok: bool, **extra) -> dict:
    resp = {
        "id": req_id,
        "ok": ok,
        "stdout": "",
        "stderr": "",
        "error": None,
        "artifacts": [],
        "result": None,
    }
    resp.update(extra)
    return resp


def _bbox(namespace: dict) -> list:
    box = namespace.get("SCENE_BBOX")
    if (
        isinstance(box, (list, tuple))
        and len(box) == 2
        and all(isinstance(corner, (list, tuple)) and len(corner) == 3 for corner in box)
    ):
        return [list(map(float, box[0])), list(map(float, box[1]))]
    return [list(c) for c in _ZERO_BBOX]


def _handle_exec(req_id: int, payload: dict, namespace: dict) -> dict:
    code = payload.get("code", "")

    if "# fault: hang" in code:
        time.sleep(3600)
    if "# fault: crash" in code:
        os._exit(3)
    if "# fault: malformed" in code:
        sys.stdout.write("this is not a protocol line\n")
        sys.stdout.flush()
        return {}
    wrong_id = "# fault: wrong-id" in code

    out_buf, err_buf = io.StringIO(), io.StringIO()
    error = None
    try:
        with redirect_stdout(out_buf), redirect_stderr(err_buf):
            exec(compile(code, "<session-script>", "exec"), namespace)
    except BaseException as exc:  # scripts must never kill the worker
        error = {
            "type": "ScriptException",
            "message": f"{type(exc).__name__}: {exc}",
            "traceback": traceback.format_exc(),
        }
    resp_id = req_id + 1000 if wrong_id else req_id
    return _response(
        resp_id,
        ok=error is None,
        stdout=out_buf.getvalue(),
        stderr=err_buf.getvalue(),
        error=error,
        result={"bbox": _bbox(namespace)},
    )


def _handle_render(req_id: int, payload: dict, namespace: dict) -> dict:
    plan = payload.get("plan", {})
    out_dir = Path(payload.get("out_dir", "."))
    out_dir.mkdir(parents=True, exist_ok=True)
    views = []
    artifacts = []
    png = _png_bytes()
    for k, (azimuth, elevation) in enumerate(plan.get("views", []), start=1):
        path = out_dir / f"view{k}.png"
        path.write_bytes(png)
        artifacts.append(str(path))
        views.append(
            {
                "image_path": str(path),
                "azimuth_deg": azimuth,
                "elevation_deg": elevation,
                "camera_distance": plan.get("distance", 0.0),
            }
        )
    return _response(
        req_id, ok=True, artifacts=artifacts, result={"bbox": _bbox(namespace), "views": views}
    )


def main() -> None:
    token = ""
    argv = sys.argv[1:]
    if "--handshake-token" in argv:
        token = argv[argv.index("--handshake-token") + 1]

    namespace: dict = {}
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
            req_id = int(request["id"])
            op = request["op"]
        except (ValueError, KeyError, TypeError):
            _emit(_response(-1, ok=False, error={
                "type": "ProtocolError", "message": "malformed request line", "traceback": None,
            }))
            continue

        payload = request.get("payload", {})
        if op == "ping":
            response = _response(
                req_id,
                ok=True,
                result={"blender_version": VERSION, "token": payload.get("token", token)},
            )
        elif op == "exec":
            response = _handle_exec(req_id, payload, namespace)
            if not response:  # the malformed-line fault already wrote its garbage
                continue
        elif op == "render":
            response = _handle_render(req_id, payload, namespace)
        elif op == "reset":
            namespace.clear()
            response = _response(req_id, ok=True)
        else:
            response = _response(req_id, ok=False, error={
                "type": "ProtocolError", "message": f"unknown op {op!r}", "traceback": None,
            })
        _emit(response)


if __name__ == "__main__":
    main()
