"""Motion encoder E_delta, recurrent shape decoder D_s, recurrent appearance/normal
decoder D_a, the multi-task loss and the training loop.

All image-space tensors are NCHW. One model step for frame t:

    f3d  = E(descriptor_t) * occupancy             (UV space, d channels)
    fhat = Pi_t f3d                                (image space)
    s_t  = D_s(fhat, s_{t-1})                      (L logits)
    A_t, n_t = D_a(fhat, softmax(s_t), A_{t-1}, n_{t-1})

Training config (JSON) fields are those of :class:`TrainConfig`.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import geometry, metrics, motionfield, render, tensorio, uvbake
from .synthdata import bare_maps
from .autodiff import ops
from .autodiff.optim import AdamState, adam_step
from .autodiff.tensor import NumericFault, Tensor

N_CLASSES = 7
ABLATIONS = ("none", "no_velocity", "no_shape", "no_normal")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    uv_resolution: int = 32
    image_size: int = 64
    d: int = 16
    T: int = 10
    enc_width: int = 8
    shape_width: int = 12
    app_width: int = 12
    lambda_s: float = 10.0
    lambda_n: float = 1.0
    lr: float = 1e-3
    batch: int = 2
    steps: int = 2000
    seed: int = 0
    ablation: str = "none"
    occupancy_channel: bool = False
    velocity_scale: float = 30.0     # m/frame -> m/s at 30 fps; keeps velocity slabs near unit scale
    recurrence: str = "teacher"     # teacher | self
    shape_loss: str = "ce"          # ce | l1
    dtype: str = "float32"
    log_every: int = 50
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {ABLATIONS}")
        if self.recurrence not in ("teacher", "self"):
            raise ConfigError("recurrence must be 'teacher' or 'self'")
        if self.shape_loss not in ("ce", "l1"):
            raise ConfigError("shape_loss must be 'ce' or 'l1'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @classmethod
    def from_dict(cls, d):
        bad = set(d) - set(cls.__dataclass_fields__)
        if bad:
            raise ConfigError(f"unknown training config field(s): {sorted(bad)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    @property
    def in_channels(self):
        return 3 + 3 * self.T + (1 if self.occupancy_channel else 0)

    @property
    def use_shape(self):
        return self.ablation != "no_shape"

    @property
    def use_normal(self):
        return self.ablation != "no_normal"


# --------------------------------------------------------------------------- layers

class Params(dict):
    """Named leaf tensors with seeded He (fan-in) initialization."""

    def __init__(self, rng, dtype):
        super().__init__()
        self.rng = rng
        self.dtype = np.dtype(dtype)

    def conv(self, name, cin, cout, k, transposed=False):
        shape = (cin, cout, k, k) if transposed else (cout, cin, k, k)
        fan_in = cin * k * k
        if transposed:
            fan_in = cin * k * k / 4.0  # stride-2 upsampling touches a quarter of the taps
        w = self.rng.normal(0.0, np.sqrt(2.0 / fan_in), shape).astype(self.dtype)
        self[name + ".w"] = Tensor(w, requires_grad=True, name=name + ".w")
        self[name + ".b"] = Tensor(np.zeros(cout, self.dtype), requires_grad=True, name=name + ".b")


class UNet:
    """conv -> two stride-2 downs -> two transposed-conv ups with skip concatenation."""

    def __init__(self, params: Params, prefix, cin, cout, width):
        self.p, self.n = params, prefix
        w = width
        params.conv(prefix + ".e1", cin, w, 3)
        params.conv(prefix + ".e2", w, 2 * w, 4)
        params.conv(prefix + ".e3", 2 * w, 2 * w, 4)
        params.conv(prefix + ".u2", 2 * w, 2 * w, 4, transposed=True)
        params.conv(prefix + ".d2", 4 * w, 2 * w, 3)
        params.conv(prefix + ".u1", 2 * w, w, 4, transposed=True)
        params.conv(prefix + ".out", 2 * w, cout, 3)

    def _c(self, name, x, stride=1, pad=1):
        return ops.conv2d(x, self.p[f"{self.n}.{name}.w"], self.p[f"{self.n}.{name}.b"], stride, pad)

    def _t(self, name, x):
        return ops.transposed_conv2d(x, self.p[f"{self.n}.{name}.w"], self.p[f"{self.n}.{name}.b"], 2, 1)

    def __call__(self, x):
        lr = ops.leaky_relu
        e1 = lr(self._c("e1", x))
        e2 = lr(self._c("e2", e1, 2, 1))
        e3 = lr(self._c("e3", e2, 2, 1))
        u2 = lr(self._t("u2", e3))
        d2 = lr(self._c("d2", ops.concat(u2, e2, axis=1)))
        u1 = lr(self._t("u1", d2))
        return self._c("out", ops.concat(u1, e1, axis=1))


# --------------------------------------------------------------------------- model

class DynamicHumanModel:
    def __init__(self, cfg: TrainConfig):
        if cfg.uv_resolution % 4 or cfg.image_size % 4:
            raise ConfigError("uv_resolution and image_size must be multiples of 4")
        self.cfg = cfg
        self.params = Params(np.random.default_rng(cfg.seed), cfg.dtype)
        self.encoder = UNet(self.params, "enc", cfg.in_channels, cfg.d, cfg.enc_width)
        if cfg.use_shape:
            self.shape_dec = UNet(self.params, "shape", cfg.d + N_CLASSES, N_CLASSES, cfg.shape_width)
        a_in = cfg.d + 3 + (N_CLASSES if cfg.use_shape else 0) + (3 if cfg.use_normal else 0)
        a_out = 3 + (3 if cfg.use_normal else 0)
        self.app_dec = UNet(self.params, "app", a_in, a_out, cfg.app_width)

    # -- the four stages
    def encode(self, descriptor, occupancy):
        """descriptor (N, C, R, R) -> f3d (N, d, R, R), zero outside occupancy."""
        x = descriptor if isinstance(descriptor, Tensor) else Tensor(descriptor)
        if x.shape[1] != self.cfg.in_channels:
            raise ConfigError(f"descriptor has {x.shape[1]} channels, expected {self.cfg.in_channels}")
        if x.shape[2:] != (self.cfg.uv_resolution,) * 2:
            raise ConfigError(f"descriptor resolution {x.shape[2:]} != {self.cfg.uv_resolution}")
        occ = np.asarray(occupancy, dtype=self.params.dtype)[None, None]
        return ops.mul(self.encoder(x), occ)

    def transport(self, f3d, matrices):
        """Pi per frame: block-diagonal sparse product, (N, d, R, R) -> (N, d, h, w)."""
        N, d, R, _ = f3d.shape
        h = w = self.cfg.image_size
        M = sp.block_diag(matrices, format="csr").astype(self.params.dtype)
        flat = ops.reshape(ops.transpose(f3d, (0, 2, 3, 1)), (N * R * R, d))
        img = ops.sparse_matmul(flat, M)
        return ops.transpose(ops.reshape(img, (N, h, w, d)), (0, 3, 1, 2))

    def decode_shape(self, fhat, s_prev):
        """Returns logits (N, L, h, w); ``s_prev`` is a class-probability map."""
        return self.shape_dec(ops.concat(fhat, _t(s_prev, fhat), axis=1))

    def decode_appearance(self, fhat, s_prob, A_prev, n_prev):
        """Returns (A (N,3,h,w) in [0,1], n (N,3,h,w) or None); n is not yet masked."""
        parts = [fhat]
        if self.cfg.use_shape:
            parts.append(s_prob)
        parts.append(_t(A_prev, fhat))
        if self.cfg.use_normal:
            parts.append(_t(n_prev, fhat))
        out = self.app_dec(ops.concat(*parts, axis=1))
        A = ops.sigmoid(out[:, 0:3])
        n = ops.tanh(out[:, 3:6]) if self.cfg.use_normal else None
        return A, n

    def step(self, inputs):
        """One recurrent step for a batch. ``inputs`` keys: desc, occ, mats, s_prev,
        A_prev, n_prev (numpy). Returns a dict of output tensors."""
        f3d = self.encode(inputs["desc"], inputs["occ"])
        fhat = self.transport(f3d, inputs["mats"])
        out = {"f3d": f3d, "fhat": fhat}
        s_prob = None
        if self.cfg.use_shape:
            logits = self.decode_shape(fhat, inputs["s_prev"])
            s_prob = ops.softmax(logits, axis=1)
            out["logits"], out["s_prob"] = logits, s_prob
            fg = np.argmax(logits.data, axis=1) > 0
        else:
            fg = np.ones((fhat.shape[0],) + fhat.shape[2:], dtype=bool)
        A, n = self.decode_appearance(fhat, s_prob, inputs["A_prev"], inputs["n_prev"])
        out["A"], out["fg"] = A, fg
        if n is not None:
            out["n"] = unit_on_mask(n, fg)
        return out

    # -- parameters
    def state(self):
        return {k: v.data for k, v in self.params.items()}

    def load_state(self, state):
        for k, v in state.items():
            if k not in self.params:
                raise ConfigError(f"checkpoint has unknown parameter {k}")
            if v.shape != self.params[k].shape:
                raise ConfigError(f"shape mismatch for {k}")
            self.params[k].data = np.array(v, dtype=self.params.dtype)


def _t(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def unit_on_mask(n, mask, eps=1e-8):
    """n / |n| on ``mask`` (N, h, w), zero elsewhere."""
    sq = ops.sum(ops.mul(n, n), axis=1, keepdims=True)
    inv = ops.div(Tensor(mask[:, None].astype(n.dtype)), ops.sqrt(ops.add(sq, eps)))
    return ops.mul(n, inv)


def one_hot(labels, L=N_CLASSES, dtype=np.float32):
    """(N, h, w) int -> (N, L, h, w)."""
    return (np.arange(L)[None, :, None, None] == labels[:, None]).astype(dtype)


# --------------------------------------------------------------------------- loss

@dataclass
class LossTerms:
    total: Tensor
    L_a: float
    L_s: float
    L_n: float


def loss(cfg: TrainConfig, out, gt, terms=("a", "s", "n")) -> LossTerms:
    """L_a + lambda_s L_s + lambda_n L_n.

    ``gt`` holds A (N,3,h,w), S (N,h,w) int, n (N,3,h,w). L_a is averaged over
    GT foreground union predicted foreground, L_n over GT foreground.
    """
    for key in ("A", "S", "n"):
        if key not in gt:
            raise KeyError(f"ground truth channel '{key}' missing")
    gfg = gt["S"] > 0
    A = out["A"]
    zero = Tensor(np.zeros((), A.dtype))
    total = zero
    la = ls = ln = 0.0
    if "a" in terms:
        wa = (gfg | out["fg"])[:, None].astype(A.dtype)
        La = ops.l1(A, gt["A"].astype(A.dtype), weight=wa)
        total = ops.add(total, La)
        la = float(La.data)
    if "s" in terms and "logits" in out:
        if cfg.shape_loss == "ce":
            Ls = ops.cross_entropy(out["logits"], gt["S"])
        else:
            Ls = ops.l1(out["s_prob"], one_hot(gt["S"], dtype=A.dtype))
        total = ops.add(total, ops.mul(Ls, cfg.lambda_s))
        ls = float(Ls.data)
    if "n" in terms and "n" in out:
        Ln = ops.l1(out["n"], gt["n"].astype(A.dtype), weight=gfg[:, None].astype(A.dtype))
        total = ops.add(total, ops.mul(Ln, cfg.lambda_n))
        ln = float(Ln.data)
    return LossTerms(total, la, ls, ln)


# --------------------------------------------------------------------------- data

@dataclass
class FrameBank:
    """Everything the model consumes, precomputed per dataset frame."""
    desc: np.ndarray          # (N, C, R, R)
    occupancy: np.ndarray     # (R, R)
    mats: list                # csr (h*w, R*R) per frame: Pi_t with seam dilation folded in
    A: np.ndarray             # (N, 3, h, w)
    S: np.ndarray             # (N, h, w) int
    n: np.ndarray             # (N, 3, h, w)
    boot_S: np.ndarray        # bare-body bootstrap maps, same layouts
    boot_A: np.ndarray
    boot_n: np.ndarray
    segment: np.ndarray
    local: np.ndarray
    splits: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.segment)

    def prev(self, idx, pred=None):
        """Previous-frame maps for frames ``idx`` (GT, or bootstrap at segment start)."""
        idx = np.asarray(idx)
        first = self.local[idx] == 0
        p = np.where(first, idx, idx - 1)
        S = np.where(first[:, None, None], self.boot_S[idx], self.S[p])
        A = np.where(first[:, None, None, None], self.boot_A[idx], self.A[p])
        n = np.where(first[:, None, None, None], self.boot_n[idx], self.n[p])
        return S, A, n


def dilation_matrix(raster: uvbake.UvRaster):
    """(R*R, R*R) operator: keep occupied texels, copy them into the seam ring."""
    R2 = raster.resolution ** 2
    rows = np.concatenate([raster.texel, raster.dil_texel])
    cols = np.concatenate([raster.texel, raster.dil_src])
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(R2, R2))


def _model_inputs(body, frames, local, cfg: TrainConfig, raster=None):
    """Descriptors, transport matrices and bare-body bootstraps for posed frames.

    ``local`` restarts the velocity history wherever it is 0.
    """
    R, size = cfg.uv_resolution, cfg.image_size
    raster = raster or uvbake.get_raster(body, R)
    D = dilation_matrix(raster)
    dt = np.dtype(cfg.dtype)
    meshes = [geometry.pose(body, f) for f in frames]
    N = len(frames)
    desc = np.zeros((N, cfg.in_channels, R, R), dt)
    mats = []
    bS = np.zeros((N, size, size), np.int64)
    bA = np.zeros((N, 3, size, size), dt)
    bn = np.zeros((N, 3, size, size), dt)
    for i in range(N):
        start = i - local[i]
        hist = meshes[max(start, i - cfg.T):i + 1]
        fd = motionfield.frame_derivatives(body, hist, cfg.T)
        g = uvbake.descriptor_grid(raster, fd, zero_velocity=cfg.ablation == "no_velocity",
                                   occupancy_channel=cfg.occupancy_channel)
        desc[i] = g.data.transpose(2, 0, 1)
        desc[i, 3:3 + 3 * cfg.T] *= cfg.velocity_scale
        boot, fr = bare_maps(body, meshes[i], frames[i].camera, size)
        M, _ = render.transport_matrix(fr, raster.support)
        mats.append((M @ D).tocsr())
        bS[i], bA[i], bn[i] = boot.semantics, boot.appearance.transpose(2, 0, 1), boot.normals.transpose(2, 0, 1)
    return desc, raster.occupancy.copy(), mats, bS, bA, bn


def prepare(ds, cfg: TrainConfig) -> FrameBank:
    size = cfg.image_size
    if ds.appearance.shape[1] != size:
        raise ConfigError(f"dataset image size {ds.appearance.shape[1]} != config {size}")
    dt = np.dtype(cfg.dtype)
    frames = [ds.pose_frame(i) for i in range(len(ds))]
    desc, occ, mats, bS, bA, bn = _model_inputs(ds.body, frames, ds.local, cfg)
    return FrameBank(desc, occ, mats,
                     ds.appearance.transpose(0, 3, 1, 2).astype(dt),
                     ds.semantics.astype(np.int64),
                     ds.normals.transpose(0, 3, 1, 2).astype(dt),
                     bS, bA, bn, ds.segment.copy(), ds.local.copy(), dict(ds.splits))


def inference_bank(body, frames, cfg: TrainConfig, segment=None) -> FrameBank:
    """A FrameBank for posed frames without ground truth (GT maps are zero).

    ``segment`` (default: one segment) splits the frames into independent
    sequences, each bootstrapped at its first frame.
    """
    N = len(frames)
    segment = np.zeros(N, np.int64) if segment is None else np.asarray(segment)
    local = np.zeros(N, np.int64)
    for i in range(1, N):
        local[i] = local[i - 1] + 1 if segment[i] == segment[i - 1] else 0
    desc, occ, mats, bS, bA, bn = _model_inputs(body, frames, local, cfg)
    size = cfg.image_size
    dt = np.dtype(cfg.dtype)
    return FrameBank(desc, occ, mats, np.zeros((N, 3, size, size), dt), np.zeros((N, size, size), np.int64),
                     np.zeros((N, 3, size, size), dt), bS, bA, bn, segment, local,
                     {"all": list(range(N))})


def batch_inputs(bank: FrameBank, idx, prev=None):
    idx = np.asarray(idx)
    S, A, n = bank.prev(idx) if prev is None else prev
    return {"desc": bank.desc[idx], "occ": bank.occupancy, "mats": [bank.mats[i] for i in idx],
            "s_prev": one_hot(S, dtype=bank.desc.dtype), "A_prev": A, "n_prev": n}


def batch_gt(bank: FrameBank, idx):
    idx = np.asarray(idx)
    return {"A": bank.A[idx], "S": bank.S[idx], "n": bank.n[idx]}


# --------------------------------------------------------------------------- checkpoints

def save_checkpoint(model, directory, step, extra=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {"step": int(step), "seed": model.cfg.seed, "dtype": model.cfg.dtype,
             "config": model.cfg.to_dict(), "params": {}}
    for k, v in model.params.items():
        fname = f"{k}.tnsr"
        tensorio.save_tensor(directory / fname, v.data)
        index["params"][k] = {"file": fname, "shape": list(v.shape)}
    if extra:
        index.update(extra)
    tensorio.write_json(directory / "index.json", index)
    return directory


def load_checkpoint(directory):
    directory = Path(directory)
    index = tensorio.read_json(directory / "index.json")
    model = DynamicHumanModel(TrainConfig.from_dict(index["config"]))
    model.load_state({k: tensorio.load_tensor(directory / v["file"]) for k, v in index["params"].items()})
    return model, index


# --------------------------------------------------------------------------- training / inference

def train_step(model, bank, idx, state: AdamState, pred_cache=None):
    cfg = model.cfg
    prev = None
    if cfg.recurrence == "self" and pred_cache is not None:
        prev = _self_prev(bank, idx, pred_cache)
    out = model.step(batch_inputs(bank, idx, prev))
    terms = loss(cfg, out, batch_gt(bank, idx))
    for p in model.params.values():
        p.grad = None
    terms.total.backward()
    adam_step({k: p.data for k, p in model.params.items()},
              {k: p.grad for k, p in model.params.items()}, state)
    if pred_cache is not None:
        _remember(pred_cache, idx, out)
    return terms


def _remember(cache, idx, out):
    S = np.argmax(out["logits"].data, 1) if "logits" in out else None
    for j, i in enumerate(idx):
        cache[int(i)] = (None if S is None else S[j], out["A"].data[j],
                         out["n"].data[j] if "n" in out else None)


def _self_prev(bank, idx, cache):
    """Previous maps from the model's own (detached, possibly stale) predictions."""
    S, A, n = bank.prev(idx)
    S, A, n = S.copy(), A.copy(), n.copy()
    for j, i in enumerate(idx):
        if bank.local[i] > 0 and int(i) - 1 in cache:
            s_, a_, n_ = cache[int(i) - 1]
            if s_ is not None:
                S[j] = s_
            A[j] = a_
            if n_ is not None:
                n[j] = n_
    return S, A, n


def trainable_frames(bank):
    return np.array(bank.splits["train"])


def train(cfg: TrainConfig, bank: FrameBank, out_dir=None, progress=None):
    """Adam on random training frames. Returns (model, history rows)."""
    model = DynamicHumanModel(cfg)
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed + 1)
    frames = trainable_frames(bank)
    history = []
    cache = {} if cfg.recurrence == "self" else None
    out_dir = Path(out_dir) if out_dir else None
    writer = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "metrics.csv", "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss", "L_a", "L_s", "L_n"])
        save_checkpoint(model, out_dir / "ckpt-last-good", 0)
    try:
        for step in range(cfg.steps):
            idx = rng.choice(frames, size=cfg.batch, replace=False)
            try:
                t = train_step(model, bank, idx, state, cache)
            except NumericFault as e:
                if out_dir:
                    raise NumericFault(f"{e}; last good checkpoint in {out_dir / 'ckpt-last-good'}") from e
                raise
            row = (step, float(t.total.data), t.L_a, t.L_s, t.L_n)
            history.append(row)
            if writer and (step % cfg.log_every == 0 or step == cfg.steps - 1):
                writer.writerow([row[0]] + [f"{x:.6g}" for x in row[1:]])
            if out_dir and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, out_dir / "ckpt-last-good", step + 1)
            if progress:
                progress(step, row)
    finally:
        if writer:
            fh.close()
    if out_dir:
        save_checkpoint(model, out_dir / "ckpt-final", cfg.steps)
    return model, history


def run_sequence(model, bank: FrameBank, frames, teacher=False):
    """Free-running inference over consecutive frames of one segment.

    The first frame consumes the bare-body bootstrap; after that only the
    model's own previous outputs are fed back (unless ``teacher``).
    Returns per-frame composite appearance (h, w, 3), labels, normals.
    """
    frames = list(frames)
    outs = []
    prev = None
    for i in frames:
        if teacher or prev is None or bank.local[i] == 0:
            S, A, n = bank.prev([i])
        else:
            S, A, n = prev
        o = model.step(batch_inputs(bank, [i], (S, A, n)))
        fg = o["fg"]
        lab = np.argmax(o["logits"].data, 1) if "logits" in o else np.where(fg, 1, 0)
        A_ = o["A"].data
        n_ = o["n"].data if "n" in o else np.zeros_like(A_)
        prev = (lab, A_, n_)
        comp = A_ * fg[:, None] if model.cfg.use_shape else A_
        outs.append((comp[0].transpose(1, 2, 0), lab[0], n_[0].transpose(1, 2, 0)))
    return outs


def evaluate(model, bank: FrameBank, split="test", teacher=False):
    """Held-out foreground L1 and SSIM of the composite appearance."""
    idx = np.array(bank.splits[split])
    l1s, ssims = [], []
    for seg in np.unique(bank.segment[idx]):
        frames = idx[bank.segment[idx] == seg]
        frames = frames[np.argsort(bank.local[frames])]
        outs = run_sequence(model, bank, frames, teacher)
        for i, (A, _, _) in zip(frames, outs):
            gt = bank.A[i].transpose(1, 2, 0)
            fg = bank.S[i] > 0
            l1s.append(float(np.abs(A - gt)[fg].mean()))
            ssims.append(metrics.ssim(np.clip(A, 0, 1).astype(float), gt.astype(float)))
    return {"l1_fg": float(np.mean(l1s)), "ssim": float(np.mean(ssims)), "frames": len(l1s)}


def write_config(cfg: TrainConfig, path):
    tensorio.write_json(path, cfg.to_dict())


def read_config(path) -> TrainConfig:
    try:
        return TrainConfig.from_dict(json.loads(Path(path).read_text()))
    except (TypeError, json.JSONDecodeError) as e:
        raise ConfigError(f"invalid training config {path}: {e}") from e
