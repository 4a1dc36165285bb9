"""Shim executed inside Blender's embedded interpreter.

Launch: ``blender --background --python blender_worker.py -- --handshake-token T``

Reads one JSON request per stdin line, answers one JSON response per stdout
line, and writes nothing else to stdout: script prints are captured into the
response, shim logging goes to stderr. Script payloads run in one persistent
namespace with the scene kept alive between requests until a reset, and no
payload exception can take the loop down.

The shim is deliberately dumb: no retrieval, no prompting, no policy. It also
runs under a plain Python interpreter (no bpy) for protocol-level testing, in
which case exec works, renders report an honest error, and the scene bounding
box falls back to a ``SCENE_BBOX`` variable if a script sets one.

Stdlib only; independent of the host package.
"""

from __future__ import annotations

import io
import json
import math
import sys
import traceback
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path

try:
    import bpy  # type: ignore
except ImportError:  # running outside Blender
    bpy = None

_ZERO_BBOX = [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]
_protocol_out = sys.stdout


def _log(message: str) -> None:
    print(f"[blender-worker] {message}", file=sys.stderr, flush=True)


def _emit(obj: dict) -> None:
    _protocol_out.write(
        json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":")) + "\n"
    )
    _protocol_out.flush()


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


def _version() -> str:
    if bpy is not None:
        return f"Blender {bpy.app.version_string}"
    return "no-bpy python {}.{}.{}".format(*sys.version_info[:3])


def scene_bbox(namespace: dict | None = None) -> list:
    """Union of world-space bounds of all visible mesh objects; origin if empty."""
    if bpy is None:
        box = (namespace or {}).get("SCENE_BBOX")
        if isinstance(box, (list, tuple)) and len(box) == 2:
            return [list(map(float, box[0])), list(map(float, box[1]))]
        return [list(c) for c in _ZERO_BBOX]
    lo = [math.inf] * 3
    hi = [-math.inf] * 3
    found = False
    for obj in bpy.context.scene.objects:
        if obj.type != "MESH" or not obj.visible_get():
            continue
        found = True
        for corner in obj.bound_box:
            world = obj.matrix_world @ __import__("mathutils").Vector(corner)
            for axis in range(3):
                lo[axis] = min(lo[axis], world[axis])
                hi[axis] = max(hi[axis], world[axis])
    if not found:
        return [list(c) for c in _ZERO_BBOX]
    return [lo, hi]


def _reset_scene(namespace: dict) -> None:
    namespace.clear()
    if bpy is not None:
        bpy.ops.wm.read_factory_settings(use_empty=True)


def _handle_exec(req_id: int, payload: dict, namespace: dict) -> dict:
    code = payload.get("code", "")
    out_buf, err_buf = io.StringIO(), io.StringIO()
    error = None
    try:
        with redirect_stdout(out_buf), redirect_stderr(err_buf):
            exec(compile(code, "<session-script>", "exec"), namespace)
    except BaseException as exc:
        error = {
            "type": "ScriptException",
            "message": f"{type(exc).__name__}: {exc}",
            "traceback": traceback.format_exc(),
        }
    return _response(
        req_id,
        ok=error is None,
        stdout=out_buf.getvalue(),
        stderr=err_buf.getvalue(),
        error=error,
        result={"bbox": scene_bbox(namespace)},
    )


def _ensure_lights() -> None:
    """Neutral three-point rig when the script added no lights of its own."""
    if any(obj.type == "LIGHT" for obj in bpy.context.scene.objects):
        return
    positions = [(6.0, -4.0, 7.0, 900.0), (-7.0, -2.0, 4.0, 400.0), (0.0, 8.0, 5.0, 300.0)]
    for i, (x, y, z, energy) in enumerate(positions):
        light_data = bpy.data.lights.new(name=f"rig_light_{i}", type="POINT")
        light_data.energy = energy
        light = bpy.data.objects.new(name=f"rig_light_{i}", object_data=light_data)
        light.location = (x, y, z)
        bpy.context.scene.collection.objects.link(light)


def _handle_render(req_id: int, payload: dict, namespace: dict) -> dict:
    if bpy is None:
        return _response(req_id, ok=False, error={
            "type": "ScriptException",
            "message": "bpy is not available; rendering requires Blender",
            "traceback": "RuntimeError: bpy is not available in this interpreter\n",
        })
    import mathutils

    plan = payload.get("plan", {})
    resolution = int(payload.get("resolution", 768))
    out_dir = Path(payload.get("out_dir", "."))
    out_dir.mkdir(parents=True, exist_ok=True)

    scene = bpy.context.scene
    try:
        scene.render.engine = "BLENDER_EEVEE_NEXT"
    except TypeError:
        scene.render.engine = "BLENDER_EEVEE"
    scene.render.resolution_x = resolution
    scene.render.resolution_y = resolution
    _ensure_lights()

    camera = bpy.data.objects.get("worker_camera")
    if camera is None:
        cam_data = bpy.data.cameras.new("worker_camera")
        camera = bpy.data.objects.new("worker_camera", cam_data)
        scene.collection.objects.link(camera)
    camera.data.angle = math.radians(plan.get("fov_deg", 50.0))
    scene.camera = camera

    target = mathutils.Vector(plan.get("target", (0.0, 0.0, 0.0)))
    distance = float(plan.get("distance", 5.0))

    views = []
    artifacts = []
    for k, (azimuth_deg, elevation_deg) in enumerate(plan.get("views", []), start=1):
        az = math.radians(azimuth_deg)
        el = math.radians(elevation_deg)
        camera.location = (
            target.x + distance * math.cos(el) * math.cos(az),
            target.y + distance * math.cos(el) * math.sin(az),
            target.z + distance * math.sin(el),
        )
        direction = target - camera.location
        camera.rotation_euler = direction.to_track_quat("-Z", "Y").to_euler()
        path = out_dir / f"view{k}.png"
        scene.render.filepath = str(path)
        bpy.ops.render.render(write_still=True)
        artifacts.append(str(path))
        views.append(
            {
                "image_path": str(path),
                "azimuth_deg": azimuth_deg,
                "elevation_deg": elevation_deg,
                "camera_distance": distance,
            }
        )
    return _response(
        req_id,
        ok=True,
        artifacts=artifacts,
        result={"bbox": scene_bbox(namespace), "views": views},
    )


def serve_loop() -> None:
    argv = sys.argv
    if "--" in argv:
        argv = argv[argv.index("--") + 1 :]
    token = ""
    if "--handshake-token" in argv:
        token = argv[argv.index("--handshake-token") + 1]

    _log(f"ready ({_version()})")
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
        try:
            if op == "ping":
                response = _response(
                    req_id,
                    ok=True,
                    result={"blender_version": _version(), "token": payload.get("token", token)},
                )
            elif op == "exec":
                response = _handle_exec(req_id, payload, namespace)
            elif op == "render":
                response = _handle_render(req_id, payload, namespace)
            elif op == "reset":
                _reset_scene(namespace)
                response = _response(req_id, ok=True)
            else:
                response = _response(req_id, ok=False, error={
                    "type": "ProtocolError", "message": f"unknown op {op!r}", "traceback": None,
                })
        except BaseException as exc:  # the loop must survive anything
            _log(f"internal error handling {op}: {exc}")
            response = _response(req_id, ok=False, error={
                "type": "ScriptException",
                "message": f"{type(exc).__name__}: {exc}",
                "traceback": traceback.format_exc(),
            })
        _emit(response)
    _log("stdin closed, exiting")


if __name__ == "__main__":
    serve_loop()
