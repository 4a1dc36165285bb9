import bpy

mat = bpy.data.materials.new(name="Paint")
mat.use_nodes = True
tree = mat.node_tree
bsdf = tree.nodes["Principled BSDF"]
bsdf.inputs['Base Color'].default_value = (1.0, 0.0, 0.0, 1.0)
tex = tree.nodes.new("ShaderNodeTexNoise")
tree.links.new(tex.outputs['Color'], bsdf.inputs['Base Color'])
