"""Canonical motion descriptors do not change when the whole body is rotated and moved.

Poses a short random dance twice, once as is and once under a global rotation
plus translation, bakes normals and velocity history to UV and prints the largest
difference. Also writes the normal channels of one frame as a PNG.
"""
import sys

import numpy as np

from dynhuman import geometry, motionfield, render, synthdata, uvbake

out = sys.argv[1] if len(sys.argv) > 1 else "descriptor_normals.png"
body = geometry.procedural_body()
rng = np.random.default_rng(0)
th = synthdata.random_script(rng, n_frames=20).thetas(body.n_joints)
cam = synthdata.default_camera(64)
frames = [geometry.PoseFrame(t, np.zeros(body.n_blendshapes), cam) for t in th]
R = geometry.rodrigues(np.array([0.2, 1.9, -0.4]))
raster = uvbake.get_raster(body, 32)


def bake(fs, shift=0.0):
    meshes = [geometry.pose(body, f) for f in fs]
    meshes = [geometry.PosedMesh(m.positions + shift, m.vertex_rotations, m.joint_transforms) for m in meshes]
    fd = motionfield.frame_derivatives(body, meshes[-11:], 10)
    return uvbake.descriptor_grid(raster, fd).data


a = bake(frames)
b = bake([f.with_root(R) for f in frames], shift=np.array([0.5, -0.2, 1.0]))
print("channels:", a.shape[-1], "(3 normal + 3 x 10 velocity)")
print("max |difference| after rotation + translation: %.2e" % np.abs(a - b).max())
print("velocity rms: %.4f m/frame" % np.sqrt(np.mean(a[..., 3:] ** 2)))
render.save_png(out, a[..., :3], "normal")
print("wrote", out)
