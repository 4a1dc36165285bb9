"""blendforge: an agent team that writes and refines Blender scripts from text prompts."""

__version__ = "0.1.0"
