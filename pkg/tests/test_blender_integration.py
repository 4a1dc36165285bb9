"""Smoke tests against a real Blender install.

Skipped unless a Blender binary is reachable (BLENDER_PATH env var or
``blender`` on PATH). Non-gating for the primary suite: everything else runs
on the fake worker.
"""

from __future__ import annotations

import os
import shutil

import pytest

from blendforge.bridge import (
    blender_worker_config,
    plan_cameras,
    render_views,
    start_worker,
)

BLENDER = os.environ.get("BLENDER_PATH") or shutil.which("blender")

pytestmark = pytest.mark.skipif(BLENDER is None, reason="no Blender install available")

CUBE_SCRIPT = """\
import bpy

bpy.ops.object.select_all(action='SELECT')
bpy.ops.object.delete()
bpy.ops.mesh.primitive_cube_add(size=2, location=(0.0, 0.0, 0.0))
cube = bpy.context.object
cube.name = "smoke_cube"
mat = bpy.data.materials.new(name="smoke_red")
mat.diffuse_color = (0.9, 0.1, 0.1, 1.0)
cube.data.materials.append(mat)
print("cube ready")
"""


@pytest.fixture(scope="module")
def worker():
    supervisor = start_worker(
        blender_worker_config(BLENDER, startup_timeout_s=120.0, exec_timeout_s=300.0)
    )
    yield supervisor
    supervisor.close()


def test_exec_cube_script(worker):
    outcome = worker.execute(CUBE_SCRIPT)
    assert outcome.ok, outcome.error
    assert "cube ready" in outcome.stdout


def test_default_cube_bbox(worker):
    worker.reset()
    outcome = worker.execute(CUBE_SCRIPT)
    assert outcome.ok
    lo, hi = worker.last_bbox
    assert lo == pytest.approx([-1.0, -1.0, -1.0], abs=1e-6)
    assert hi == pytest.approx([1.0, 1.0, 1.0], abs=1e-6)


def test_two_cubes_union_bbox(worker):
    worker.reset()
    worker.execute(CUBE_SCRIPT)
    outcome = worker.execute(
        "import bpy\nbpy.ops.mesh.primitive_cube_add(size=2, location=(10.0, 0.0, 0.0))\n"
    )
    assert outcome.ok
    lo, hi = worker.last_bbox
    assert lo[0] == pytest.approx(-1.0, abs=1e-6)
    assert hi[0] == pytest.approx(11.0, abs=1e-6)


def test_render_five_views(worker, tmp_path):
    worker.reset()
    worker.execute(CUBE_SCRIPT)
    plan = plan_cameras(worker.last_bbox, m=5)
    rs = render_views(worker, plan, tmp_path / "views", 256, "smoke")
    assert rs.view_count == 5
    for view in rs.views:
        data = open(view.image_path, "rb").read()
        assert data.startswith(b"\x89PNG"), view.image_path
        assert len(data) > 100
