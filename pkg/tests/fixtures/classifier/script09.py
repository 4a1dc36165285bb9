import bpy

# bmesh.new() in a comment stays invisible
label = "bpy.ops.mesh.primitive_uv_sphere_add(radius=1)"
bpy.ops.object.shade_smooth()
