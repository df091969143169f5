"""Procedural ground truth: scripted motion, a spring-damper skirt hem, and
shaded GT maps whose appearance depends on how the body has been moving.

Dataset directory layout::

    manifest.json            frame count, splits, seed, config + hash, segments
    body.obj, body.json      the canonical body used for every frame
    frames/%06d.png          GT appearance (8-bit RGB)
    frames/%06d.tnsr         float32 (h, w, 7): appearance, normals, semantic label
    gt/params.csv            frame, segment, local frame, camera, theta (J*3)
    gt/hem.tnsr              float64 (N, R, 3) simulated hem positions
"""
from __future__ import annotations

import csv
import io
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import geometry, motionfield, render, tensorio
from .geometry import BOTTOM, SEMANTIC_CLASSES, TOP


class InstabilityError(FloatingPointError):
    pass


# --------------------------------------------------------------------------- motion scripts

@dataclass
class Channel:
    """One sinusoidal joint-angle curve, ``offset + A(t) sin(2 pi f tau + phase)``.

    ``A(t) = amplitude * (1 + mod_depth * sin(2 pi mod_frequency t))`` lets the
    amplitude drift from cycle to cycle; ``tau`` is the script's warped clock.
    """
    joint: int
    axis: int
    amplitude: float
    frequency: float          # cycles per (warped) second
    phase: float = 0.0
    offset: float = 0.0
    mod_depth: float = 0.0
    mod_frequency: float = 0.0


@dataclass
class MotionScript:
    channels: list
    n_frames: int
    fps: float = 30.0
    speed: float = 1.0
    speed_var: float = 0.0     # relative speed modulation depth, < 1
    speed_period: float = 2.0  # seconds
    speed_phase: float = 0.0
    name: str = ""

    def times(self):
        return np.arange(self.n_frames) / self.fps

    def clock(self):
        """Warped time per frame: the integral of the instantaneous speed."""
        t = self.times()
        rate = self.speed * (1.0 + self.speed_var * np.sin(2 * np.pi * t / self.speed_period
                                                            + self.speed_phase))
        tau = np.zeros(self.n_frames)
        tau[1:] = np.cumsum(rate[1:]) / self.fps
        return tau

    def thetas(self, n_joints=16):
        t = self.times()
        tau = self.clock()
        th = np.zeros((self.n_frames, n_joints, 3))
        for c in self.channels:
            amp = c.amplitude * (1.0 + c.mod_depth * np.sin(2 * np.pi * c.mod_frequency * t))
            th[:, c.joint, c.axis] += c.offset + amp * np.sin(2 * np.pi * c.frequency * tau + c.phase)
        if not np.all(np.isfinite(th)):
            raise InstabilityError("non-finite joint angles in motion script")
        return th

    def scaled(self, factor):
        """Same pose path played ``factor`` times faster (and shorter)."""
        n = max(2, int(round(self.n_frames / factor)))
        return replace(self, speed=self.speed * factor, n_frames=n)

    def to_dict(self):
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["channels"] = [Channel(**c) for c in d["channels"]]
        return cls(**d)


def walk_script(n_frames=60, fps=30.0, cadence=0.9, stride=0.45, arm=0.35, speed=1.0,
                speed_var=0.0, phase=0.0):
    """Walk cycle in place: hips/knees/shoulders/elbows with the usual phase offsets."""
    ch = [
        Channel(10, 0, stride, cadence, phase), Channel(13, 0, stride, cadence, phase + np.pi),
        Channel(11, 0, 0.5 * stride, cadence, phase - 1.2, 0.5 * stride),
        Channel(14, 0, 0.5 * stride, cadence, phase + np.pi - 1.2, 0.5 * stride),
        # arms hang down (shoulder roll about z) and swing opposite to the legs
        Channel(4, 2, 0.0, 0.0, 0.0, 1.25), Channel(7, 2, 0.0, 0.0, 0.0, -1.25),
        Channel(4, 0, arm, cadence, phase + np.pi), Channel(7, 0, arm, cadence, phase),
        Channel(5, 1, 0.3 * arm, cadence, phase, 0.3), Channel(8, 1, 0.3 * arm, cadence, phase, -0.3),
        Channel(0, 1, 0.15, cadence, phase + 0.5 * np.pi),
        Channel(0, 2, 0.05, 2 * cadence, phase),
    ]
    return MotionScript(ch, n_frames, fps, speed, speed_var, name="walk")


def turn_script(n_frames=150, fps=30.0, amplitude=1.2, period=1.0, mod_depth=0.0,
                mod_frequency=0.0, arms=True):
    """Root yaw oscillation (left turn, right turn, ...) with arms held out."""
    ch = [Channel(0, 1, amplitude, 1.0 / period, 0.0, 0.0, mod_depth, mod_frequency)]
    if arms:
        ch += [Channel(4, 2, 0.0, 0.0, 0.0, 0.6), Channel(7, 2, 0.0, 0.0, 0.0, -0.6),
               Channel(5, 1, 0.0, 0.0, 0.0, 0.5), Channel(8, 1, 0.0, 0.0, 0.0, -0.5)]
    return MotionScript(ch, n_frames, fps, name="turn")


def random_script(rng, n_frames=48, fps=30.0):
    """A walk/dance mixture with random amplitudes, tempo and tempo drift."""
    s = walk_script(n_frames, fps,
                    cadence=rng.uniform(0.6, 1.2),
                    stride=rng.uniform(0.2, 0.55),
                    arm=rng.uniform(0.2, 0.6),
                    speed=rng.uniform(0.6, 1.6),
                    speed_var=rng.uniform(0.6, 0.95),
                    phase=rng.uniform(0, 2 * np.pi))
    extra = [
        Channel(0, 2, rng.uniform(0.05, 0.2), rng.uniform(0.3, 0.9), rng.uniform(0, 2 * np.pi)),
        Channel(0, 1, rng.uniform(0.1, 0.6), rng.uniform(0.2, 0.6), rng.uniform(0, 2 * np.pi)),
        Channel(2, 1, rng.uniform(0.0, 0.3), rng.uniform(0.3, 1.0), rng.uniform(0, 2 * np.pi)),
        Channel(3, 1, rng.uniform(0.0, 0.3), rng.uniform(0.3, 1.0), rng.uniform(0, 2 * np.pi)),
        Channel(4, 1, rng.uniform(0.0, 0.5), rng.uniform(0.3, 1.0), rng.uniform(0, 2 * np.pi)),
        Channel(7, 1, rng.uniform(0.0, 0.5), rng.uniform(0.3, 1.0), rng.uniform(0, 2 * np.pi)),
        # lateral leg swings stay in the image plane
        Channel(10, 2, rng.uniform(0.0, 0.3), rng.uniform(0.4, 1.0), rng.uniform(0, 2 * np.pi), -0.1),
        Channel(13, 2, rng.uniform(0.0, 0.3), rng.uniform(0.4, 1.0), rng.uniform(0, 2 * np.pi), 0.1),
    ]
    s.channels += extra
    s.speed_period = rng.uniform(0.8, 2.0)
    s.speed_phase = rng.uniform(0, 2 * np.pi)
    s.name = "random"
    return s


# --------------------------------------------------------------------------- garment proxy

@dataclass
class GarmentProxy:
    n_hem: int = 16
    n_mid: int = 2                  # interpolated rings between waist and hem
    stiffness: float = 60.0         # k, 1/s^2 (unit mass)
    damping: float | None = None    # c, 1/s; None -> critical 2 sqrt(k)
    substeps: int = 4
    waist_y: float = -0.05
    waist_radii: tuple = (0.17, 0.12)
    hem_y: float = 0.40
    hem_radii: tuple = (0.27, 0.20)
    hip_coupling: float = 0.5       # share of each hem target driven by the near hip
    wrinkle_gain: float = 2.0       # amplitude per m/s of tangential speed
    wrinkle_max: float = 0.8
    folds: int = 2                  # pleats per turn around the vertical axis
    sleeves: bool = True            # the top covers the forearms
    leggings: bool = True           # the bottom covers thighs and shins

    def __post_init__(self):
        c = self.c
        if not (self.stiffness > 0 and 0 < c * c <= 4 * self.stiffness + 1e-12):
            raise ValueError("need k > 0 and 0 < c^2 <= 4k")
        if self.substeps < 4:
            raise ValueError("substeps must be >= 4")
        if self.n_hem < 3:
            raise ValueError("n_hem must be >= 3")

    @property
    def c(self):
        return 2.0 * np.sqrt(self.stiffness) if self.damping is None else float(self.damping)

    def ring_angles(self):
        return 2 * np.pi * np.arange(self.n_hem) / self.n_hem

    def rest_ring(self, y, radii):
        a = self.ring_angles()
        return np.stack([radii[0] * np.cos(a), np.full_like(a, y), radii[1] * np.sin(a)], axis=1)

    def hem_weights(self, n_joints=16):
        """Skinning weights of the hem *targets* (the hem itself is simulated)."""
        a = self.ring_angles()
        side = 0.5 * (1.0 + np.cos(a))    # 1 at +X (left), 0 at -X (right)
        W = np.zeros((self.n_hem, n_joints))
        W[:, 0] = 1.0 - self.hip_coupling
        W[:, 10] = self.hip_coupling * side
        W[:, 13] = self.hip_coupling * (1.0 - side)
        return W


def skin_points(body, frame, weights, rest_points):
    """LBS of extra points with their own weights (no blendshapes)."""
    theta, _ = geometry._check_frame(body, frame)
    GR, Gt = geometry.joint_globals(body, theta)
    Tt = Gt - np.einsum("jab,jb->ja", GR, body.joint_rest)
    MR = np.einsum("vj,jab->vab", weights, GR)
    return np.einsum("vab,vb->va", MR, rest_points) + weights @ Tt


@dataclass
class Simulation:
    meshes: list             # PosedMesh per frame (bare body)
    frames: list             # PoseFrame per frame
    waist: np.ndarray        # (n, R, 3) skinned waist ring
    targets: np.ndarray      # (n, R, 3) skinned hem attachment targets
    hem: np.ndarray          # (n, R, 3) simulated hem
    hem_vel: np.ndarray      # (n, R, 3) m/s
    fps: float

    def __len__(self):
        return len(self.meshes)


def integrate(x, v, target_prev, target_next, k, c, dt_frame, substeps):
    """Semi-implicit Euler over one frame; the target moves linearly between frames."""
    h = dt_frame / substeps
    for i in range(1, substeps + 1):
        tgt = target_prev + (target_next - target_prev) * (i / substeps)
        v = v + h * (k * (tgt - x) - c * v)
        x = x + h * v
    return x, v


def simulate(body, script: MotionScript, garment: GarmentProxy, camera=(32.0, 32.0, 30.0),
             beta=None, hem0=None):
    """Pose the body along the script and integrate the hem springs."""
    beta = np.zeros(body.n_blendshapes) if beta is None else np.asarray(beta, float)
    thetas = script.thetas(body.n_joints)
    n, R = len(thetas), garment.n_hem
    waist_rest = garment.rest_ring(garment.waist_y, garment.waist_radii)
    hem_rest = garment.rest_ring(garment.hem_y, garment.hem_radii)
    Ww = np.zeros((R, body.n_joints))
    Ww[:, 0] = 1.0
    Wh = garment.hem_weights(body.n_joints)
    frames, meshes = [], []
    waist = np.zeros((n, R, 3))
    targets = np.zeros((n, R, 3))
    for i in range(n):
        fr = geometry.PoseFrame(thetas[i], beta, np.asarray(camera, float))
        frames.append(fr)
        meshes.append(geometry.pose(body, fr))
        waist[i] = skin_points(body, fr, Ww, waist_rest)
        targets[i] = skin_points(body, fr, Wh, hem_rest)
    hem = np.zeros((n, R, 3))
    vel = np.zeros((n, R, 3))
    x = targets[0].copy() if hem0 is None else np.asarray(hem0, float).copy()
    v = np.zeros((R, 3))
    hem[0], vel[0] = x, v
    dt = 1.0 / script.fps
    for i in range(1, n):
        x, v = integrate(x, v, targets[i - 1], targets[i], garment.stiffness, garment.c,
                         dt, garment.substeps)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise InstabilityError(f"hem diverged at frame {i}: k={garment.stiffness}, "
                                   f"c={garment.c}, substeps={garment.substeps}")
        hem[i], vel[i] = x, v
    return Simulation(meshes, frames, waist, targets, hem, vel, script.fps)


# --------------------------------------------------------------------------- skirt mesh

def skirt_topology(garment: GarmentProxy):
    """Faces of the skirt tube: rows waist, mid rings..., hem; R+1 columns (seam duplicated)."""
    R, rows = garment.n_hem, garment.n_mid + 2
    cols = R + 1
    f = []
    for r in range(rows - 1):
        for c in range(R):
            a0, b0 = r * cols + c, r * cols + c + 1
            a1, b1 = (r + 1) * cols + c, (r + 1) * cols + c + 1
            f += [(a0, b0, b1), (a0, b1, a1)]
    return np.array(f, dtype=np.int64)


def skirt_positions(waist, hem, n_mid):
    """(rows * (R+1), 3) vertex positions, rings linearly interpolated."""
    s = np.linspace(0.0, 1.0, n_mid + 2)[:, None, None]
    rings = waist[None] * (1 - s) + hem[None] * s
    rings = np.concatenate([rings, rings[:, :1]], axis=1)
    return rings.reshape(-1, 3)


def _orient_outward(faces, pos, axis_points):
    tri = pos[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    out = tri.mean(1) - axis_points
    return faces if np.sum(np.einsum("fk,fk->f", n, out)) >= 0 else faces[:, ::-1].copy()


# --------------------------------------------------------------------------- shading

CLASS_ALBEDO = np.array([
    [0.0, 0.0, 0.0],      # background
    [0.80, 0.25, 0.20],   # top
    [0.20, 0.32, 0.72],   # bottom
    [0.92, 0.72, 0.58],   # face
    [0.28, 0.17, 0.10],   # hair
    [0.86, 0.63, 0.50],   # skin
    [0.15, 0.15, 0.17],   # shoes
])
LIGHT = np.array([0.3, -0.5, -0.8]) / np.linalg.norm([0.3, -0.5, -0.8])
NORMAL_TILT = 0.8
AMBIENT = 0.3


def default_camera(size=64):
    """Frames the standing body (y in [-0.8, 0.95]) in a square image."""
    s = 0.85 * size / 1.8
    return np.array([size / 2.0, size / 2.0 - 0.07 * s, s])


@dataclass
class GtFrame:
    appearance: np.ndarray   # (h, w, 3) in [0, 1]
    semantics: np.ndarray    # (h, w) uint8 in 0..6
    normals: np.ndarray      # (h, w, 3), unit on mask
    mask: np.ndarray         # (h, w) bool


def _shade_pixels(albedo, amp, coord, n, t, mask):
    """Band-modulated albedo with normals tilted along the band gradient."""
    band = np.sin(2 * np.pi * coord)
    nn = n + (NORMAL_TILT * amp * np.cos(2 * np.pi * coord))[..., None] * t
    nrm = np.linalg.norm(nn, axis=-1, keepdims=True)
    nn = np.where(nrm > 1e-12, nn / np.where(nrm > 1e-12, nrm, 1.0), 0.0)
    lam = AMBIENT + (1 - AMBIENT) * np.maximum(0.0, nn @ LIGHT)
    A = albedo * (1.0 - 0.5 * amp * (1.0 + band))[..., None] * lam[..., None]
    A = np.where(mask[..., None], np.clip(A, 0.0, 1.0), 0.0)
    nn = np.where(mask[..., None], nn, 0.0)
    return A, nn


def _tangential_speed(vel, normals):
    vt = vel - np.einsum("vk,vk->v", vel, normals)[:, None] * normals
    return np.linalg.norm(vt, axis=1)


def _unit_tangent(d, normals):
    t = d - np.einsum("vk,vk->v", d, normals)[:, None] * normals
    nrm = np.linalg.norm(t, axis=1, keepdims=True)
    return np.where(nrm > 1e-12, t / np.where(nrm > 1e-12, nrm, 1.0), 0.0)


def garment_labels(body, garment: GarmentProxy):
    """Per-face semantic labels of the dressed body (the bare body plus sleeves/leggings)."""
    labels = body.part_labels.copy()
    names = np.array([""] + list(body.part_names))[body.face_parts]
    if garment.sleeves:
        labels[np.char.endswith(names, "forearm")] = TOP
    if garment.leggings:
        labels[np.char.endswith(names, "thigh") | np.char.endswith(names, "shin")] = BOTTOM
    return labels


def shade(body, sim: Simulation, garment: GarmentProxy, camera=None, size=64):
    """GT appearance, semantics and normals for every simulated frame."""
    cam = render.Camera.from_params(default_camera(size) if camera is None else camera, size, size)
    m = body.n_vertices
    sfaces = skirt_topology(garment)
    faces = np.concatenate([body.faces, sfaces + m])
    labels = np.concatenate([garment_labels(body, garment), np.full(len(sfaces), BOTTOM)])
    albedo_face = CLASS_ALBEDO[labels]
    clothed = np.isin(labels, [TOP, BOTTOM])
    R = garment.n_hem
    rows, cols = garment.n_mid + 2, R + 1
    s_row = np.repeat(np.linspace(0.0, 1.0, rows), cols)
    s_col = np.tile(np.arange(cols), rows)
    # pleats follow the azimuth of the rest normal, so the pattern is a function of the
    # canonical surface orientation rather than of absolute position
    n0 = motionfield.surface_normals(body.vertices, body.faces)
    body_coord = garment.folds * np.arctan2(n0[:, 0], n0[:, 2]) / (2 * np.pi)
    t0 = np.stack([n0[:, 2], np.zeros(m), -n0[:, 0]], 1)
    skirt_coord = garment.folds * s_col / R
    coord = np.concatenate([body_coord, skirt_coord])
    out = []
    prev_body = None
    for i in range(len(sim)):
        mesh = sim.meshes[i]
        bpos = mesh.positions
        spos = skirt_positions(sim.waist[i], sim.hem[i], garment.n_mid)
        if i == 0:
            sfaces_o = _orient_outward(sfaces, spos, np.stack([np.zeros(len(spos)), spos[:, 1],
                                                                np.zeros(len(spos))], 1)[sfaces].mean(1))
            faces = np.concatenate([body.faces, sfaces_o + m])
        pos = np.concatenate([bpos, spos])
        bn = motionfield.surface_normals(bpos, body.faces)
        sn = motionfield.surface_normals(spos, faces[len(body.faces):] - m)
        normals_v = np.concatenate([bn, sn])
        # velocities in m/s: body by backward difference, skirt rows blend waist and hem
        bvel = np.zeros_like(bpos) if prev_body is None else (bpos - prev_body) * sim.fps
        wv = np.zeros((R, 3)) if i == 0 else (sim.waist[i] - sim.waist[i - 1]) * sim.fps
        hv = sim.hem_vel[i]
        svel = skirt_positions(wv, hv, garment.n_mid)
        speed = np.concatenate([_tangential_speed(bvel, bn), _tangential_speed(svel, sn)])
        amp_v = np.minimum(garment.wrinkle_gain * speed, garment.wrinkle_max)
        # band gradient: around the vertical axis on the body and around the ring on the skirt
        bt = _unit_tangent(geometry.apply_vertex_rotations(mesh, t0), bn)
        ring = spos.reshape(rows, cols, 3)
        around = np.roll(ring[:, :R], -1, axis=1) - np.roll(ring[:, :R], 1, axis=1)
        around = np.concatenate([around, around[:, :1]], axis=1).reshape(-1, 3)
        st = _unit_tangent(around, sn)
        tang = np.concatenate([bt, st])
        xy = render.project(cam, pos)
        fid, bary, depth = render.rasterize_triangles(xy, pos[:, 2], faces, size, size)
        fr = render.RenderedFrame(fid, bary, depth, np.zeros(fid.shape + (3,)))
        mask = fr.mask
        amp = render.interpolate(fr, faces, amp_v)
        amp = np.where(mask & render.face_attribute(fr, clothed, False), amp, 0.0)
        A, N = _shade_pixels(render.face_attribute(fr, albedo_face, 0.0),
                             amp, render.interpolate(fr, faces, coord),
                             render.interpolate(fr, faces, normals_v),
                             render.interpolate(fr, faces, tang), mask)
        sem = render.face_attribute(fr, labels, 0).astype(np.uint8)
        out.append(GtFrame(A, sem, N, mask))
        prev_body = bpos
    return out


def bare_maps(body, mesh, camera, size=64):
    """Bare-body (no garment, no wrinkles) semantics, appearance and normals.

    These bootstrap the recurrent decoders at the first frame.
    """
    cam = render.Camera.from_params(camera, size, size)
    fr = render.rasterize(mesh.positions, body, cam)
    mask = fr.mask
    n = render.normal_map(fr, body.faces, motionfield.surface_normals(mesh.positions, body.faces))
    zero = np.zeros(mask.shape)
    A, N = _shade_pixels(render.face_attribute(fr, CLASS_ALBEDO[body.part_labels], 0.0),
                         zero, zero, n, np.zeros_like(n), mask)
    sem = render.face_attribute(fr, body.part_labels, 0).astype(np.uint8)
    return GtFrame(A, sem, N, mask), fr


# --------------------------------------------------------------------------- dataset

@dataclass
class SynthConfig:
    n_segments: int = 8
    frames_per_segment: int = 40
    test_segments: int = 2
    image_size: int = 64
    fps: float = 30.0
    garment: dict = field(default_factory=dict)
    body: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown synth config field(s): {sorted(bad)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass
class SynthDataset:
    body: geometry.CanonicalBody
    config: SynthConfig
    seed: int
    appearance: np.ndarray    # (N, h, w, 3) float32
    semantics: np.ndarray     # (N, h, w) uint8
    normals: np.ndarray       # (N, h, w, 3) float32
    thetas: np.ndarray        # (N, J, 3)
    cameras: np.ndarray       # (N, 3)
    segment: np.ndarray       # (N,) segment id
    local: np.ndarray         # (N,) frame index inside the segment
    hem: np.ndarray           # (N, R, 3)
    splits: dict
    scripts: list

    def __len__(self):
        return len(self.segment)

    @property
    def mask(self):
        return self.semantics > 0

    def segment_frames(self, seg):
        return np.flatnonzero(self.segment == seg)

    def pose_frame(self, i):
        return geometry.PoseFrame(self.thetas[i], np.zeros(self.body.n_blendshapes), self.cameras[i])


def generate(config: SynthConfig | None = None, seed: int = 0) -> SynthDataset:
    cfg = config or SynthConfig()
    if cfg.test_segments >= cfg.n_segments or cfg.test_segments < 1:
        raise ValueError("need 1 <= test_segments < n_segments")
    body = geometry.procedural_body(**cfg.body)
    garment = GarmentProxy(**cfg.garment)
    rng = np.random.default_rng(seed)
    cam = default_camera(cfg.image_size)
    A, S, Nn, TH, seg, loc, hems, scripts = [], [], [], [], [], [], [], []
    for k in range(cfg.n_segments):
        script = random_script(rng, cfg.frames_per_segment, cfg.fps)
        sim = simulate(body, script, garment, cam)
        gts = shade(body, sim, garment, cam, cfg.image_size)
        A += [g.appearance for g in gts]
        S += [g.semantics for g in gts]
        Nn += [g.normals for g in gts]
        TH.append(np.stack([f.theta for f in sim.frames]))
        hems.append(sim.hem)
        seg += [k] * len(sim)
        loc += list(range(len(sim)))
        scripts.append(script)
    seg = np.array(seg)
    test_ids = set(range(cfg.n_segments - cfg.test_segments, cfg.n_segments))
    splits = {"train": [int(i) for i in np.flatnonzero(~np.isin(seg, list(test_ids)))],
              "test": [int(i) for i in np.flatnonzero(np.isin(seg, list(test_ids)))]}
    return SynthDataset(body, cfg, seed,
                        np.stack(A).astype(np.float32), np.stack(S), np.stack(Nn).astype(np.float32),
                        np.concatenate(TH), np.tile(cam, (len(seg), 1)), seg, np.array(loc),
                        np.concatenate(hems), splits, scripts)


def export(ds: SynthDataset, out_dir):
    """Write the dataset atomically (temp dir, then rename into place)."""
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=out_dir.name + ".tmp-", dir=out_dir.parent))
    try:
        (tmp / "frames").mkdir()
        (tmp / "gt").mkdir()
        geometry.save_body(ds.body, tmp / "body.obj")
        for i in range(len(ds)):
            render.save_png(tmp / "frames" / f"{i:06d}.png", ds.appearance[i])
            stack = np.concatenate([ds.appearance[i], ds.normals[i],
                                    ds.semantics[i][..., None].astype(np.float32)], axis=-1)
            tensorio.save_tensor(tmp / "frames" / f"{i:06d}.tnsr", stack.astype(np.float32))
        tensorio.save_tensor(tmp / "gt" / "hem.tnsr", ds.hem.astype(np.float64))
        J = ds.thetas.shape[1]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame", "segment", "local", "cx", "cy", "s"]
                   + [f"theta_{j}_{a}" for j in range(J) for a in "xyz"])
        for i in range(len(ds)):
            w.writerow([i, int(ds.segment[i]), int(ds.local[i])]
                       + [repr(float(x)) for x in ds.cameras[i]]
                       + [repr(float(x)) for x in ds.thetas[i].reshape(-1)])
        (tmp / "gt" / "params.csv").write_text(buf.getvalue())
        cfgd = ds.config.to_dict()
        manifest = {
            "format": "dynhuman-synth/1",
            "frame_count": len(ds),
            "image_size": ds.config.image_size,
            "seed": ds.seed,
            "config": cfgd,
            "config_hash": tensorio.config_hash({"config": cfgd, "seed": ds.seed}),
            "splits": ds.splits,
            "segments": [{"id": k, "frames": [int(x) for x in ds.segment_frames(k)],
                          "script": s.to_dict()} for k, s in enumerate(ds.scripts)],
            "semantic_classes": list(SEMANTIC_CLASSES),
        }
        tensorio.write_json(tmp / "manifest.json", manifest)
        if (out_dir / "runs").is_dir():
            # run manifests are append-only; carry them over
            shutil.copytree(out_dir / "runs", tmp / "runs")
        if out_dir.exists():
            old = out_dir.with_name(out_dir.name + ".old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(out_dir, old)
            os.replace(tmp, out_dir)
            shutil.rmtree(old)
        else:
            os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return out_dir


def load(in_dir) -> SynthDataset:
    in_dir = Path(in_dir)
    man = tensorio.read_json(in_dir / "manifest.json")
    if man.get("format") != "dynhuman-synth/1":
        raise ValueError(f"{in_dir} is not a dynhuman synthetic dataset")
    body = geometry.load_body(in_dir / "body.obj")
    n = man["frame_count"]
    stacks = [tensorio.load_tensor(in_dir / "frames" / f"{i:06d}.tnsr") for i in range(n)]
    st = np.stack(stacks)
    with open(in_dir / "gt" / "params.csv", newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    P = np.array([[float(x) for x in r] for r in rows])
    J = (P.shape[1] - 6) // 3
    cfg = SynthConfig.from_dict(man["config"])
    return SynthDataset(body, cfg, man["seed"], st[..., :3], st[..., 6].astype(np.uint8),
                        st[..., 3:6], P[:, 6:].reshape(n, J, 3), P[:, 3:6],
                        P[:, 1].astype(int), P[:, 2].astype(int),
                        tensorio.load_tensor(in_dir / "gt" / "hem.tnsr"),
                        {k: list(v) for k, v in man["splits"].items()},
                        [MotionScript.from_dict(s["script"]) for s in man["segments"]])
