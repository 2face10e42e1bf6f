"""Command-line entry point.

Every subcommand takes --config, --seed and --out and writes ``run_manifest.json``
into --out with the config digest, seed, argv, library versions and a hash of
every file it produced. Exit codes: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from .errors import ConfigError, EmptySweep, FormatError, PillarFlowError

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(out: Path, command, argv, cfg, outputs):
    from . import __version__
    from .config import dump_config
    files = {}
    for p in sorted(outputs):
        p = Path(p)
        files[p.relative_to(out).as_posix() if p.is_relative_to(out) else str(p)] = _sha256(p)
    doc = {"command": command, "argv": list(argv), "seed": cfg.run.seed, "config_sha256": cfg.digest(),
           "config": dump_config(cfg),
           "versions": {"pillarflow": __version__, "python": platform.python_version(), "numpy": np.__version__,
                        "scipy": scipy.__version__},
           "outputs": files}
    path = out / "run_manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# ------------------------------------------------------------------ subcommands

def cmd_simulate(args, cfg, out):
    """Pair samples for a train/val manifest, or one multi-frame sequence with --sequence."""
    from .datagen import synth_scene, synth_sequence, write_sample
    from .io import write_manifest
    written = []
    if args.sequence:
        seq = synth_sequence(replace(cfg.scene, seed=cfg.run.seed), args.frames or cfg.run.n_frames,
                             movers=not args.static)
        written += write_sequence(out / "sequence", seq)
        return written
    n_train = cfg.run.n_train if args.n_train is None else args.n_train
    n_val = cfg.run.n_val if args.n_val is None else args.n_val
    entries = []
    # disjoint seed blocks per split
    for split, n, base in (("train", n_train, 1_000_000), ("val", n_val, 0)):
        for i in range(n):
            d = out / "samples" / f"{split}_{i:05d}"
            write_sample(d, synth_scene(replace(cfg.scene, seed=cfg.run.seed * 10_000_000 + base + i)))
            entries.append((split, d))
            written += sorted(p for p in d.iterdir())
    write_manifest(out / "manifest.csv", entries)
    return written + [out / "manifest.csv"]


def write_sequence(d: Path, seq):
    from .datagen import write_annotations
    from .io import write_pcbin
    d.mkdir(parents=True, exist_ok=True)
    written = []
    anns = []
    for k, sweep in enumerate(seq.sweeps):
        p = d / f"sweep_{k:04d}.pcbin"
        write_pcbin(p, sweep)
        written.append(p)
        anns += seq.annotations_world(k)
    with open(d / "poses.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t", "yaw", "tx", "ty", "tz"])
        for t, pose in zip(seq.times, seq.world_from_ego):
            w.writerow([repr(float(t)), repr(pose.yaw)] + [repr(float(v)) for v in pose.translation])
    write_annotations(d / "ann_world.csv", anns)
    return written + [d / "poses.csv", d / "ann_world.csv"]


def read_sequence(d: Path):
    """(frames, annotations by time) from a directory written by ``write_sequence``."""
    from .datagen import read_annotations
    from .io import read_pcbin
    from .lidar import RigidTransform2_5D
    from .tracking.tracker import Frame
    d = Path(d)
    try:
        with open(d / "poses.csv", newline="") as f:
            rows = list(csv.DictReader(f))
        poses = [(float(r["t"]), RigidTransform2_5D(float(r["yaw"]), (float(r["tx"]), float(r["ty"]), float(r["tz"]))))
                 for r in rows]
    except (KeyError, TypeError, ValueError):
        raise FormatError("malformed poses.csv", section="poses", offset=0) from None
    sweeps = sorted(d.glob("sweep_*.pcbin"))
    if len(sweeps) != len(poses):
        raise FormatError(f"{len(sweeps)} sweeps but {len(poses)} poses", section="poses", offset=0)
    frames = [Frame(read_pcbin(p), pose, t) for p, (t, pose) in zip(sweeps, poses)]
    anns = {}
    for a in read_annotations(d / "ann_world.csv"):
        anns.setdefault(a.t, []).append(a)
    return frames, anns


def cmd_train(args, cfg, out):
    from .datagen import load_split
    from .flownet import save_checkpoint, train
    tr = load_split(args.manifest, "train", cfg.grid)
    va = load_split(args.manifest, "val", cfg.grid)
    if not tr:
        raise FormatError("manifest has no train split", section="manifest", offset=0)
    log_path = out / "train_log.csv"
    with open(log_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "step", "lr", "mean_loss", "rmse_dynamic", "rmse_static"])

        def log(m):
            w.writerow([m["epoch"], m["step"], repr(m["lr"]), repr(m["mean_loss"]),
                        repr(m.get("rmse_dynamic")), repr(m.get("rmse_static"))])
            print(f"epoch {m['epoch']} loss {m['mean_loss']:.4f}", file=sys.stderr)

        params, hist = train(tr, cfg.net, cfg.train, cfg.loss, seed=cfg.run.seed, val_set=va or None, log=log)
    with open(out / "train_losses.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "loss"])
        step = 0
        for m in hist:
            for loss in m["losses"]:
                w.writerow([step, repr(float(loss))])
                step += 1
    ckpt = out / "model.pfw"
    save_checkpoint(ckpt, params, cfg.net)
    return [log_path, out / "train_losses.csv", ckpt]


def _load_net(path):
    from .flownet import load_checkpoint
    try:
        return load_checkpoint(path)
    except OSError as e:
        raise FileNotFoundError(f"cannot read checkpoint {path}: {e}") from None


def cmd_infer(args, cfg, out):
    from .flownet import forward
    from .io import read_cloud, read_pose_csv, write_flow
    from .lidar import RigidTransform2_5D
    from .viz import flow_colorize, write_ppm
    params, net = _load_net(args.checkpoint)
    prev, curr = read_cloud(args.prev), read_cloud(args.curr)
    pose = read_pose_csv(args.pose) if args.pose else RigidTransform2_5D()
    flow = forward(prev, curr, pose, params, net, seed=cfg.run.seed)
    p = out / "flow.flow"
    write_flow(p, flow)
    written = [p]
    if args.image:
        img = out / "flow.ppm"
        write_ppm(img, flow_colorize(flow, args.max_speed))
        written.append(img)
    return written


def _flow_metrics_rows(preds, gts, masks):
    from .metrics import pooled_flow_metrics
    return pooled_flow_metrics(preds, gts, masks)


def cmd_baseline(args, cfg, out):
    from .baselines.dogma import DogmaGrid, dogma_step
    from .baselines.icp import icp_flow_for_sample
    from .baselines.ogm import binarize_ogm
    from .datagen import load_split
    from .flownet import infer_samples, prepare_samples
    from .io import read_manifest, write_flow
    from .metrics import dynamic_mask_from_gt
    samples = load_split(args.manifest, args.split, cfg.grid)
    names = [p.name for p in read_manifest(args.manifest, args.split)]
    if not samples:
        raise FormatError(f"manifest has no {args.split!r} split", section="manifest", offset=0)
    grid = cfg.grid
    if args.method == "icp":
        preds = [icp_flow_for_sample(s, grid, gate=cfg.icp.gate, seed=cfg.run.seed) for s in samples]
    elif args.method == "ogm":
        if not args.checkpoint:
            raise UsageError("baseline ogm needs --checkpoint of a one-channel (input_mode=ogm) network")
        params, net = _load_net(args.checkpoint)
        if net.input_mode != "ogm":
            raise UsageError("checkpoint was not trained on binary occupancy input")
        preds = infer_samples(samples, params, net, seed=cfg.run.seed)
    else:
        preds = []
        for i, s in enumerate(prepare_samples(samples, replace(cfg.net, grid=grid), seed=cfg.run.seed)):
            # the previous sweep is already in the current frame; two updates per pair
            st = DogmaGrid.empty(grid, cfg.dogma)
            dt = float(s.sweep_curr.timestamp - s.sweep_prev.timestamp)
            for cloud in (s.sweep_prev, s.sweep_curr):
                z = binarize_ogm(cloud, grid).data[0] > 0
                st = dogma_step(st, z, dt, cfg.dogma, seed=cfg.run.seed + i)
            preds.append(st.to_flow(dt))
    fdir = out / f"{args.method}_flows"
    fdir.mkdir(parents=True, exist_ok=True)
    written = []
    for n, f in zip(names, preds):
        p = fdir / f"{n}.flow"
        write_flow(p, f)
        written.append(p)
    m = _flow_metrics_rows(preds, [s.gt for s in samples], [dynamic_mask_from_gt(s.gt) for s in samples])
    if args.method == "icp":
        # ICP flow exists only on matched clusters; no static or pooled figure is reported
        m["rmse_static"] = m["rmse_average"] = None
    mp = out / f"{args.method}_metrics.json"
    mp.write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
    print(json.dumps(m, sort_keys=True))
    return written + [mp]


def cmd_track(args, cfg, out):
    from .tracking.tracker import run_cluster_tracker, write_track_log
    frames, _ = read_sequence(args.sequence)
    flows = None
    if args.checkpoint:
        from .flownet import forward
        params, net = _load_net(args.checkpoint)
        flows = [None]
        for k in range(1, len(frames)):
            rel = frames[k].world_from_ego.inverse().compose(frames[k - 1].world_from_ego)
            try:
                flows.append(forward(frames[k - 1].cloud, frames[k].cloud, rel, params, net, seed=cfg.run.seed + k))
            except EmptySweep:
                flows.append(None)
    res = run_cluster_tracker(frames, flows, replace(cfg.tracker, grid=cfg.grid), seed=cfg.run.seed)
    log = out / "tracks.csv"
    write_track_log(log, res.rows)
    fp = out / "footprints.json"
    fp.write_text(json.dumps([{"t": t, "cluster_id": cid, "cells": sorted(map(list, cells))}
                              for (t, cid), cells in sorted(res.footprints.items())]) + "\n")
    return [log, fp]


def cmd_eval_flow(args, cfg, out):
    from .io import read_flow
    from .metrics import dynamic_mask_from_gt
    pred, gt = Path(args.pred), Path(args.gt)
    if pred.is_dir() != gt.is_dir():
        raise UsageError("--pred and --gt must both be files or both be directories")
    if pred.is_dir():
        names = sorted(p.name for p in pred.glob("*.flow"))
        pairs = [(pred / n, gt / n if (gt / n).exists() else gt / Path(n).stem / "gt.flow") for n in names]
    else:
        pairs = [(pred, gt)]
    P = [read_flow(a, cfg.grid) for a, _ in pairs]
    G = [read_flow(b, cfg.grid) for _, b in pairs]
    m = _flow_metrics_rows(P, G, [dynamic_mask_from_gt(g) for g in G])
    p = out / "flow_report.csv"
    with open(p, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k in sorted(m):
            w.writerow([k, "" if m[k] is None else repr(m[k])])
    print(json.dumps(m, sort_keys=True))
    return [p]


def cmd_eval_track(args, cfg, out):
    from .metrics import track_velocity_error
    from .tracking.tracker import read_track_log
    frames, anns = read_sequence(args.sequence)
    rows = read_track_log(args.tracks)
    fp_path = Path(args.footprints) if args.footprints else Path(args.tracks).with_name("footprints.json")
    footprints = None
    if fp_path.exists():
        footprints = {(d["t"], d["cluster_id"]): {tuple(c) for c in d["cells"]} for d in json.loads(fp_path.read_text())}
    poses = {fr.t: fr.world_from_ego for fr in frames}
    rep = track_velocity_error(rows, anns, footprints, cfg.grid, args.iou, poses=poses)
    p = out / "track_report.csv"
    with open(p, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["category", "mean", "p95", "count"])
        for c, mean, p95, n in rep.as_rows():
            w.writerow([c, "" if mean is None else repr(mean), "" if p95 is None else repr(p95), n])
    print(p.read_text(), end="")
    return [p]


def cmd_gradcheck(args, cfg, out):
    from .checks import check_ops, end_to_end_check
    errs = check_ops(cfg.run.seed)
    e2e = end_to_end_check(cfg.run.seed) if not args.ops_only else {}
    p = out / "gradcheck.csv"
    with open(p, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["case", "max_rel_error"])
        for k, v in errs.items():
            w.writerow([k, repr(v)])
            print(f"{k:20s} {v:.3e}")
        if e2e:
            worst = max(e2e.values())
            w.writerow(["end_to_end", repr(worst)])
            print(f"{'end_to_end':20s} {worst:.3e}")
    ok = max(errs.values()) <= args.tol and (not e2e or max(e2e.values()) <= args.e2e_tol)
    return [p], (EXIT_OK if ok else EXIT_DATA)


# ------------------------------------------------------------------ parser

def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int, help="overrides [run] seed")
    common.add_argument("--out", help="output directory (default: [run] out)")

    p = _Parser(prog="pillarflow", description="BeV flow from LIDAR sweep pairs, baselines and tracking.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--n-train", type=int)
    s.add_argument("--n-val", type=int)
    s.add_argument("--sequence", action="store_true", help="write one multi-frame sequence instead")
    s.add_argument("--frames", type=int)
    s.add_argument("--static", action="store_true", help="sequence without moving objects")

    s = sub.add_parser("train", parents=[common], help="train the flow net on a manifest")
    s.add_argument("--manifest", required=True)

    s = sub.add_parser("infer", parents=[common], help="flow for one sweep pair")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--prev", required=True)
    s.add_argument("--curr", required=True)
    s.add_argument("--pose", help="ego.csv with the prev->curr pose (identity if omitted)")
    s.add_argument("--image", action="store_true", help="also write a PPM color image")
    s.add_argument("--max-speed", type=float, default=10.0)

    s = sub.add_parser("baseline", parents=[common], help="run a classical baseline on a manifest split")
    s.add_argument("method", choices=["icp", "ogm", "dogma"])
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--checkpoint", help="one-channel network for the ogm baseline")

    s = sub.add_parser("track", parents=[common], help="cluster tracker over a sequence")
    s.add_argument("--sequence", required=True)
    s.add_argument("--checkpoint", help="flow net for the velocity prior (no prior if omitted)")

    s = sub.add_parser("eval-flow", parents=[common], help="RMSE / AAE of FLOW files")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)

    s = sub.add_parser("eval-track", parents=[common], help="track velocity error against annotations")
    s.add_argument("--tracks", required=True)
    s.add_argument("--sequence", required=True)
    s.add_argument("--footprints")
    s.add_argument("--iou", type=float, default=0.5, help="track-to-box footprint overlap threshold")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every operator")
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--e2e-tol", type=float, default=1e-3)
    s.add_argument("--ops-only", action="store_true")
    return p


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "infer": cmd_infer, "baseline": cmd_baseline,
            "track": cmd_track, "eval-flow": cmd_eval_flow, "eval-track": cmd_eval_track,
            "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    from .config import load_config
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("pillarflow: a subcommand is required")
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = Path(args.out or cfg.run.out)
        out.mkdir(parents=True, exist_ok=True)
        res = COMMANDS[args.command](args, cfg, out)
        written, code = res if isinstance(res, tuple) else (res, EXIT_OK)
        write_run_manifest(out, args.command, argv, cfg, written)
        return code
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, EmptySweep, PillarFlowError, OSError, UnicodeDecodeError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
