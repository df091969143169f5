"""``dynhuman`` command line.

Every subcommand takes ``--out``, ``--seed`` and ``--config`` (JSON), writes
its primary outputs under ``--out`` and appends one manifest to
``<out>/runs/``. Exit codes: 0 ok, 2 usage, 3 data, 4 numeric fault.
"""
from __future__ import annotations

import os

# BLAS threads must be capped before numpy loads
_threads = os.environ.get("DYND_THREADS", "1")
for _v in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_v, _threads)

import argparse
import csv
import json
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__, geometry, metrics, nets, render, retrieval, synthdata, tensorio, track, uvbake
from . import motionfield
from .autodiff.tensor import NumericFault

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# --------------------------------------------------------------------------- helpers

def _read_config(path, cls=None):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"--config: no such file {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"--config: invalid JSON ({e})") from e
    if not isinstance(d, dict):
        raise UsageError("--config: top level must be an object")
    if cls is not None:
        bad = sorted(set(d) - set(cls.__dataclass_fields__))
        if bad:
            raise UsageError(f"--config: unknown field '{bad[0]}'")
    return d


def _need_dir(path, what):
    p = Path(path)
    if not p.is_dir():
        raise DataError(f"{what}: no such directory {p}")
    return p


def _vec3(text, flag):
    try:
        v = [float(x) for x in text.split(",")]
    except ValueError:
        raise UsageError(f"{flag}: expected three comma-separated numbers") from None
    if len(v) != 3:
        raise UsageError(f"{flag}: expected three comma-separated numbers")
    return np.array(v)


class OutputLock:
    """Exclusive lock file next to the output directory."""

    def __init__(self, out):
        self.path = Path(str(Path(out).resolve()) + ".lock")

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise DataError(f"output directory is locked by another run ({self.path})") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _load_dataset(path):
    p = _need_dir(path, "--data")
    try:
        return synthdata.load(p)
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"--data: cannot read dataset {p}: {e}") from e


def _load_run(path):
    p = _need_dir(path, "--run")
    ck = p / "ckpt-final" if (p / "ckpt-final").is_dir() else p
    if not (ck / "index.json").is_file():
        raise DataError(f"--run: no checkpoint found under {p}")
    return nets.load_checkpoint(ck)


def _save_frames(out, name, images, kind="color"):
    d = Path(out) / name
    d.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        render.save_png(d / f"{i:06d}.png", img, kind)
    return d


def _rotate_root(theta, angle):
    """Premultiply the root rotation by a yaw of ``angle`` radians."""
    th = np.array(theta, dtype=float)
    R = geometry.rodrigues(np.array([0.0, angle, 0.0])) @ geometry.rodrigues(th[0])
    th[0] = geometry.matrix_to_axis_angle(R)
    return th


# --------------------------------------------------------------------------- subcommands

def cmd_synth(args):
    try:
        cfg = synthdata.SynthConfig.from_dict(_read_config(args.config, synthdata.SynthConfig))
        synthdata.GarmentProxy(**cfg.garment)
        geometry.BodyConfig(**cfg.body)
    except (TypeError, ValueError) as e:
        raise UsageError(f"--config: {e}") from e
    ds = synthdata.generate(cfg, args.seed)
    synthdata.export(ds, args.out)
    return cfg.to_dict(), []


def cmd_descriptor(args):
    ds = _load_dataset(args.data)
    d = _read_config(args.config)
    T = int(d.get("T", args.T))
    R = int(d.get("uv_resolution", args.resolution))
    raster = uvbake.get_raster(ds.body, R)
    out = Path(args.out) / "descriptors"
    out.mkdir(parents=True, exist_ok=True)
    meshes = [geometry.pose(ds.body, ds.pose_frame(i)) for i in range(len(ds))]
    for i in range(len(ds)):
        start = i - ds.local[i]
        fd = motionfield.frame_derivatives(ds.body, meshes[max(start, i - T):i + 1], T)
        g = uvbake.descriptor_grid(raster, fd, zero_velocity=args.zero_velocity)
        tensorio.save_tensor(out / f"{i:06d}.tnsr", g.data.astype(np.float32))
        if args.png:
            render.save_png(Path(args.out) / "normals" / f"{i:06d}.png", g.data[..., :3], "normal")
    tensorio.write_json(Path(args.out) / "channels.json",
                        {"channels": uvbake.descriptor_channels(T), "resolution": R, "T": T})
    return {"T": T, "uv_resolution": R, "zero_velocity": args.zero_velocity}, [args.data]


def cmd_retrieve(args):
    d = _read_config(args.config)
    period = int(d.get("period", 40))
    cycles = int(d.get("cycles", 6))
    T = int(d.get("T", 10))
    seq = retrieval.alternating_turns(period=period, cycles=cycles, T=T,
                                      mod_depth=float(d.get("mod_depth", 0.1)))
    region = None
    if args.part:
        names = list(seq.body.part_names)
        if args.part not in names:
            raise UsageError(f"--part: unknown part '{args.part}' (one of {', '.join(names)})")
        region = names.index(args.part) + 1
    tracks = {"3d-uv": retrieval.descriptor_3d(seq, T, region=region),
              "2d-sparse": retrieval.build_2d_baseline(seq, "sparse", T),
              "2d-dense": retrieval.build_2d_baseline(seq, "dense", T)}
    q = args.query if args.query is not None else period + period // 4
    if not 0 <= q < seq.n_frames:
        raise UsageError(f"--query must lie in [0, {seq.n_frames})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    profiles, summary = {}, {}
    for kind, tr in tracks.items():
        full = retrieval.standardize(tr, tr.subset(np.arange(period)))
        top, prof = retrieval.retrieve(full.vectors[q], full, args.k + 1)
        top = [int(t) for t in top if t != q][:args.k]
        profiles[kind] = prof.scores
        rep = retrieval.phase_experiment(seq, tr)
        summary[kind] = {"top": top, "peaks": [int(p) for p in prof.peaks],
                         "phase_accuracy": rep.accuracy,
                         "phase_accuracy_out_of_plane": rep.accuracy_out_of_plane,
                         "peaks_per_cycle": rep.peaks_per_cycle}
        render.save_png(out / f"strip_{kind}.png", retrieval.patch_strip(seq, q, top, region))
    retrieval.write_scores_csv(out / "scores.csv", profiles)
    retrieval.profile_svg(profiles, out / "profile.svg", marks=[c * period for c in range(cycles + 1)])
    tensorio.write_json(out / "summary.json", {"query": q, "period": period, "cycles": cycles,
                                               "part": args.part, "kinds": summary})
    return {"period": period, "cycles": cycles, "T": T, "query": q, "k": args.k, "part": args.part}, []


def cmd_train(args):
    d = _read_config(args.config, nets.TrainConfig)
    d["seed"] = args.seed
    for k in ("steps", "ablation", "batch"):
        v = getattr(args, k)
        if v is not None:
            d[k] = v
    try:
        cfg = nets.TrainConfig.from_dict(d)
    except (nets.ConfigError, TypeError, ValueError) as e:
        raise UsageError(f"--config: {e}") from e
    ds = _load_dataset(args.data)
    bank = nets.prepare(ds, cfg)
    out = Path(args.out)
    model, _ = nets.train(cfg, bank, out)
    nets.write_config(cfg, out / "config.json")
    ev = {"test": nets.evaluate(model, bank, "test"),
          "test_teacher": nets.evaluate(model, bank, "test", teacher=True)}
    tensorio.write_json(out / "eval.json", ev)
    return cfg.to_dict(), [args.data]


def _predict_dataset(model, bank, split):
    idx = np.array(bank.splits[split])
    outs = []
    for seg in np.unique(bank.segment[idx]):
        frames = idx[bank.segment[idx] == seg]
        frames = frames[np.argsort(bank.local[frames])]
        outs += nets.run_sequence(model, bank, frames)
    return outs


def cmd_render(args):
    model, index = _load_run(args.run)
    cfg = model.cfg
    ds = _load_dataset(args.data)
    out = Path(args.out)
    params = {"orbit": args.orbit, "retarget": args.retarget, "frame": args.frame, "split": args.split}
    if args.orbit:
        seg_frames = ds.segment_frames(ds.segment[args.frame])
        upto = seg_frames[seg_frames <= args.frame]
        A, N = [], []
        for k in range(args.orbit):
            ang = 2 * np.pi * k / args.orbit
            frames = [geometry.PoseFrame(_rotate_root(ds.thetas[i], ang), np.zeros(ds.body.n_blendshapes),
                                         ds.cameras[i]) for i in upto]
            bank = nets.inference_bank(ds.body, frames, cfg)
            o = nets.run_sequence(model, bank, range(len(frames)))[-1]
            A.append(o[0])
            N.append(o[2])
        _save_frames(out, "appearance", A)
        _save_frames(out, "normals", N, "normal")
    elif args.retarget:
        src = _load_dataset(args.retarget)
        frames = [geometry.PoseFrame(src.thetas[i], np.zeros(ds.body.n_blendshapes), ds.cameras[0])
                  for i in range(len(src))]
        bank = nets.inference_bank(ds.body, frames, cfg, src.segment)
        outs = nets.run_sequence(model, bank, range(len(frames)))
        _save_frames(out, "appearance", [o[0] for o in outs])
        _save_frames(out, "normals", [o[2] for o in outs], "normal")
        _save_frames(out, "labels", [o[1] for o in outs], "label")
    else:
        bank = nets.prepare(ds, cfg)
        outs = _predict_dataset(model, bank, args.split)
        _save_frames(out, "appearance", [o[0] for o in outs])
        _save_frames(out, "normals", [o[2] for o in outs], "normal")
        _save_frames(out, "labels", [o[1] for o in outs], "label")
    return params, [args.run, args.data] + ([args.retarget] if args.retarget else [])


def cmd_relight(args):
    model, _ = _load_run(args.run)
    ds = _load_dataset(args.data)
    light = _vec3(args.light, "--light")
    bank = nets.prepare(ds, model.cfg)
    outs = _predict_dataset(model, bank, args.split)
    imgs = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for A, lab, n in outs:
            imgs.append(render.relight(A, n, lab > 0, light, args.ambient))
    _save_frames(args.out, "relit", imgs)
    return {"light": light.tolist(), "ambient": args.ambient, "split": args.split}, [args.run, args.data]


def _write_priors(path, theta, cam):
    J = theta.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "cx", "cy", "s"] + [f"theta_{j}_{a}" for j in range(J) for a in "xyz"])
        for t in range(len(theta)):
            w.writerow([t] + [repr(float(x)) for x in cam[t]] + [repr(float(x)) for x in theta[t].reshape(-1)])


def _read_priors(path):
    p = Path(path)
    if not p.is_file():
        raise DataError(f"--priors: no such file {p}")
    with open(p, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:4] != ["frame", "cx", "cy", "s"]:
        raise DataError(f"--priors: {p} lacks the header frame,cx,cy,s,theta_*")
    P = np.array([[float(x) for x in r] for r in rows[1:]])
    return P[:, 4:].reshape(len(P), -1, 3), P[:, 1:4]


def cmd_track(args):
    tcfg = track.TrackConfig.from_dict(_read_config(args.config, track.TrackConfig))
    tcfg.seed = args.seed
    if args.steps is not None:
        tcfg.steps = args.steps
    if args.lambda_t is not None:
        tcfg.lambda_t = args.lambda_t
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    gt = None
    if args.obs:
        obs_dir = _need_dir(args.obs, "--obs")
        body = geometry.load_body(obs_dir / "body.obj")
        files = sorted((obs_dir / "iuv").glob("*.tnsr"))
        if not files:
            raise DataError(f"--obs: no iuv/*.tnsr files in {obs_dir}")
        observations = [track.observation_from_iuv(body, tensorio.load_tensor(f).astype(float))
                        for f in files]
        if not args.priors:
            raise UsageError("--priors is required with --obs")
        theta_p, cam_p = _read_priors(args.priors)
        inputs = [args.obs, args.priors]
    else:
        ds = _load_dataset(args.data)
        body = ds.body
        fr = ds.segment_frames(args.segment)
        if len(fr) == 0:
            raise UsageError(f"--segment: dataset has no segment {args.segment}")
        gt = [ds.pose_frame(i) for i in fr]
        observations = [track.observe(body, f, tcfg.image_size, args.uv_noise, args.dropout, rng) for f in gt]
        theta_p = ds.thetas[fr] + rng.normal(0.0, args.prior_noise, ds.thetas[fr].shape)
        cam_p = ds.cameras[fr].copy()
        obs_dir = out / "observations"
        (obs_dir / "iuv").mkdir(parents=True, exist_ok=True)
        geometry.save_body(body, obs_dir / "body.obj")
        for t, o in enumerate(observations):
            tensorio.save_tensor(obs_dir / "iuv" / f"{t:06d}.tnsr", o.iuv.astype(np.float64))
        _write_priors(out / "priors.csv", theta_p, cam_p)
        inputs = [args.data]
    if len(theta_p) != len(observations):
        raise DataError("prior count does not match the observation count")
    try:
        res = track.track(body, observations, theta_p, cam_p, tcfg, gt_frames=gt)
    except track.TrackDivergence as e:
        track.write_reports(track.TrackResult(e.state, []), out / "diverged")
        raise NumericFault(str(e)) from e
    track.write_reports(res, out)
    summary = {"final_loss": res.history[-1][1], "initial_loss": res.history[0][1],
               "jitter": track.jitter(res.state.theta)}
    if res.final_error is not None:
        summary.update(init_err_px=float(res.init_error.mean()), final_err_px=float(res.final_error.mean()))
    tensorio.write_json(out / "summary.json", summary)
    params = dict(vars(tcfg))
    params.update(segment=args.segment, prior_noise=args.prior_noise, uv_noise=args.uv_noise,
                  dropout=args.dropout)
    return params, inputs


def _png_sequence(path, flag):
    d = _need_dir(path, flag)
    files = sorted(d.glob("*.png"))
    if not files:
        raise DataError(f"{flag}: no PNG frames in {d}")
    return [render.load_png(f).astype(float)[..., :3] / 255.0 for f in files]


def cmd_metrics(args):
    pred = _png_sequence(args.pred, "--pred")
    gt = _png_sequence(args.gt, "--gt")
    if len(pred) != len(gt):
        raise DataError(f"frame counts differ: {len(pred)} predicted vs {len(gt)} ground truth")
    try:
        rep = metrics.report(pred, gt)
    except ValueError as e:
        raise DataError(str(e)) from e
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "per_frame.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "ssim"])
        for i, s in enumerate(rep.ssim):
            w.writerow([i, f"{s:.6f}"])
    agg = {k: float(v) for k, v in rep.aggregates().items()}
    tensorio.write_json(out / "metrics.json", agg)
    return {}, [args.pred, args.gt]


# --------------------------------------------------------------------------- parser

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="dynhuman", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", help="JSON config file")
        return sp

    s = common(sub.add_parser("synth", help="generate the synthetic clothed-motion dataset"))
    s.set_defaults(func=cmd_synth)

    s = common(sub.add_parser("descriptor", help="bake canonical motion descriptors to UV"))
    s.add_argument("--data", required=True)
    s.add_argument("--T", type=int, default=10)
    s.add_argument("--resolution", type=int, default=32)
    s.add_argument("--zero-velocity", action="store_true")
    s.add_argument("--png", action="store_true", help="also write normal-channel previews")
    s.set_defaults(func=cmd_descriptor)

    s = common(sub.add_parser("retrieve", help="phase retrieval on the alternating-turn sequence"))
    s.add_argument("--query", type=int)
    s.add_argument("--k", type=int, default=3)
    s.add_argument("--part", help="restrict the 3D descriptor to one body part's UV chart")
    s.set_defaults(func=cmd_retrieve)

    s = common(sub.add_parser("train", help="train the recurrent synthesis model"))
    s.add_argument("--data", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--ablation", choices=nets.ABLATIONS)
    s.set_defaults(func=cmd_train)

    s = common(sub.add_parser("render", help="free-running synthesis from a trained run"))
    s.add_argument("--run", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--orbit", type=int, help="bullet time: N views at root yaw k*360/N")
    s.add_argument("--frame", type=int, default=0, help="frame frozen by --orbit")
    s.add_argument("--retarget", help="dataset whose joint rotations drive the body")
    s.set_defaults(func=cmd_render)

    s = common(sub.add_parser("track", help="fit pose and camera to dense IUV observations"))
    s.add_argument("--data", help="dataset to derive observations and noisy priors from")
    s.add_argument("--segment", type=int, default=0)
    s.add_argument("--obs", help="observation directory (body.obj + iuv/*.tnsr)")
    s.add_argument("--priors", help="prior CSV (frame,cx,cy,s,theta_*)")
    s.add_argument("--prior-noise", type=float, default=0.1)
    s.add_argument("--uv-noise", type=float, default=0.0)
    s.add_argument("--dropout", type=float, default=0.0)
    s.add_argument("--steps", type=int)
    s.add_argument("--lambda-t", type=float)
    s.set_defaults(func=cmd_track)

    s = common(sub.add_parser("metrics", help="SSIM and temporal distance between PNG sequences"))
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.set_defaults(func=cmd_metrics)

    s = common(sub.add_parser("relight", help="relight a trained run's predictions"))
    s.add_argument("--run", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--light", default="0,0,-1", help="unit light direction x,y,z")
    s.add_argument("--ambient", type=float, default=0.2)
    s.set_defaults(func=cmd_relight)
    return p


def _validate(args):
    if args.command == "render":
        if args.orbit is not None and args.orbit < 1:
            raise UsageError("--orbit must be >= 1")
        if args.orbit and args.retarget:
            raise UsageError("--orbit and --retarget are exclusive")
    if args.command == "track" and not (args.data or args.obs):
        raise UsageError("track needs --data or --obs")
    if args.command == "relight" and not 0.0 <= args.ambient <= 1.0:
        raise UsageError("--ambient must lie in [0, 1]")


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        _validate(args)
    except UsageError as e:
        print(f"dynhuman: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    t0 = time.time()
    try:
        with OutputLock(args.out):
            params, inputs = args.func(args)
            tensorio.write_manifest(args.out, args.command, params, args.seed, inputs,
                                    time.time() - t0, __version__)
    except UsageError as e:
        print(f"dynhuman: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericFault as e:
        print(f"dynhuman: numeric fault: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, tensorio.ContainerError, render.DataQualityError,
            uvbake.AtlasError, geometry.ParameterError, synthdata.InstabilityError) as e:
        print(f"dynhuman: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (nets.ConfigError, track.TrackDivergence) as e:
        print(f"dynhuman: error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main_entry():
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
