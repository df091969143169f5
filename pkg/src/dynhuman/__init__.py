"""Dynamic human synthesis from canonical 3D motion descriptors, at desk scale.

Submodules are imported lazily by callers; the package itself only carries
the version.
"""
__version__ = "0.1.0"
