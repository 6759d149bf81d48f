"""Command-line entry points for the full lifecycle.

Subcommands: gen-phantoms, train, sample, eval, profile. Every config key
can be overridden with a flag of the same name (``--timesteps 500``).
Exit codes: 0 success, 1 validation error, 2 dependency error,
3 runtime/compute error.
"""

from __future__ import annotations

import argparse
import resource
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ck
from . import diffusion as dm
from . import memprof, metrics, pipeline, training
from .config import RunConfig, read_kv_file
from .errors import DependencyError, ValidationError, VolsynthError
from .nhae import NHAE
from .phantom import PhantomSpec, generate_phantom
from .volume_io import RawStreamSink, load_labels, load_volume, save_labels, save_volume

STAGE_ALIASES = {"conditional-finetune": "conditional"}


def _build_config(args, extras: list[str]) -> RunConfig:
    base: dict = {}
    if getattr(args, "config", None):
        base.update(read_kv_file(args.config))
    base.update(_parse_overrides(extras))
    if getattr(args, "seed", None) is not None:
        base["seed"] = args.seed
    return RunConfig.from_dict(base)


def _parse_overrides(extras: list[str]) -> dict[str, str]:
    out = {}
    i = 0
    while i < len(extras):
        tok = extras[i]
        if not tok.startswith("--"):
            raise ValidationError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
        elif i + 1 < len(extras):
            val = extras[i + 1]
            i += 1
        else:
            raise ValidationError(f"flag --{key} needs a value")
        out[key.replace("-", "_")] = val
        i += 1
    return out


# ----------------------------------------------------------------------

def cmd_gen_phantoms(args, extras) -> int:
    cfg = _build_config(args, extras)
    out = Path(args.out or cfg.dataset_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["index,seed,depth,height,width,layers,vessels,noise_level,classes"]
    for i in range(args.count):
        spec = PhantomSpec(size=cfg.volume_shape, layer_count=cfg.phantom_layers,
                           vessel_count=cfg.phantom_vessels,
                           noise_level=cfg.phantom_noise, seed=cfg.seed + i)
        vol, lab = generate_phantom(spec)
        save_volume(vol, out / f"sample_{i:04d}.raw")
        save_labels(lab, out / f"sample_{i:04d}_labels.raw")
        rows.append(f"{i},{spec.seed},{spec.size[0]},{spec.size[1]},{spec.size[2]},"
                    f"{spec.layer_count},{spec.vessel_count},{spec.noise_level},"
                    f"{spec.class_count}")
    (out / "manifest.csv").write_text("\n".join(rows) + "\n")
    print(f"wrote {args.count} phantom pairs to {out}")
    return 0


def _load_nhae_from(ckpt_dir: Path, stage: str, cfg: RunConfig) -> NHAE:
    data = ck.require_stage(ckpt_dir, stage, cfg)
    nhae = NHAE(cfg)
    nhae.load_state_dict(data["blocks"]["nhae"])
    return nhae


def cmd_train(args, extras) -> int:
    cfg = _build_config(args, extras)
    stage = STAGE_ALIASES.get(args.stage, args.stage)
    if stage not in ck.STAGES:
        raise ValidationError(f"unknown stage {args.stage!r}; choose from "
                              f"{sorted(ck.STAGES + tuple(STAGE_ALIASES))}")
    ckpt_dir = Path(args.ckpt_dir or cfg.ckpt_dir)
    data_dir = Path(args.data or cfg.dataset_dir)
    for dep in ck.STAGE_DEPS[stage]:
        ck.require_stage(ckpt_dir, dep, cfg)  # raises naming the missing stage

    volumes, labels = training.load_dataset(data_dir,
                                            with_labels=(stage == "conditional"))
    vols = training.volumes_to_tensor(volumes)
    thumbs = training.make_thumbnails(volumes, cfg)
    torch.manual_seed(cfg.seed)

    t0 = time.time()
    if stage == "nhae-2d":
        nhae = NHAE(cfg)
        log = training.train_nhae_2d(nhae, vols, cfg, seed=cfg.seed)
        blocks = {"nhae": nhae.state_dict()}
    elif stage == "nhae-3d":
        nhae = _load_nhae_from(ckpt_dir, "nhae-2d", cfg)
        log = training.train_nhae_3d(nhae, vols, thumbs, cfg, seed=cfg.seed)
        blocks = {"nhae": nhae.state_dict()}
    elif stage == "nhae-hr":
        nhae = _load_nhae_from(ckpt_dir, "nhae-3d", cfg)
        log = training.train_nhae_hr(nhae, vols, cfg, seed=cfg.seed)
        blocks = {"nhae": nhae.state_dict()}
    elif stage == "diff3d":
        nhae = _load_nhae_from(ckpt_dir, "nhae-3d", cfg)
        model, scale, log = training.train_diff3d(nhae, thumbs, cfg, seed=cfg.seed)
        blocks = {"model": model.state_dict()}
    elif stage == "diffslice":
        nhae = _load_nhae_from(ckpt_dir, "nhae-hr", cfg)
        model, scale, log = training.train_diffslice(nhae, vols, thumbs, cfg,
                                                     seed=cfg.seed)
        blocks = {"model": model.state_dict()}
    else:  # conditional
        nhae = _load_nhae_from(ckpt_dir, "nhae-hr", cfg)
        d3ck = ck.require_stage(ckpt_dir, "diff3d", cfg)
        dsck = ck.require_stage(ckpt_dir, "diffslice", cfg)
        c = cfg.latent_channels
        diff3d = dm.Denoiser3d(c, c, cfg.unet_base)
        diff3d.load_state_dict(d3ck["blocks"]["model"])
        diffslice = dm.Denoiser2d(2 * c, c, cfg.unet_base)
        diffslice.load_state_dict(dsck["blocks"]["model"])
        head, log = training.train_conditional(
            nhae, diff3d, float(d3ck["meta"]["latent_scale"]),
            diffslice, float(dsck["meta"]["latent_scale"]),
            vols, thumbs, labels, cfg, seed=cfg.seed)
        blocks = {"diff3d": head.diff3d.state_dict(),
                  "diffslice": head.diffslice.state_dict(),
                  "label_enc3d": head.label_enc3d.state_dict(),
                  "label_enc2d": head.label_enc2d.state_dict()}

    meta = {"steps": len(log.losses), "seconds": round(log.seconds, 2),
            "final_loss": log.losses[-1] if log.losses else None}
    if stage in ("diff3d", "diffslice"):
        meta["latent_scale"] = scale
    path = ck.save_checkpoint(ck.stage_path(ckpt_dir, stage), stage, cfg,
                              blocks, meta)
    log.save_csv(ckpt_dir / f"{stage}_loss.csv")
    print(f"stage {stage}: {len(log.losses)} steps in {log.seconds:.1f}s, "
          f"final loss {meta['final_loss']:.5f} -> {path}")

    if all(ck.stage_path(ckpt_dir, s).is_file()
           for s in ("nhae-hr", "diff3d", "diffslice")):
        mpath = pipeline.write_manifest(ckpt_dir, cfg)
        print(f"bundle manifest updated: {mpath}")
    print(f"total {time.time() - t0:.1f}s")
    return 0


def cmd_sample(args, extras) -> int:
    if not args.manifest:
        raise ValidationError("sample requires --manifest")
    bundle = pipeline.load_bundle(args.manifest)
    if extras:
        raise ValidationError(f"sample does not take config overrides: {extras}")
    out = Path(args.out or bundle.config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    label = load_labels(args.label) if args.label else None
    rows = ["index,seed,wall_time_s,peak_rss_bytes"]
    for i in range(args.count):
        seed = args.seed + i
        sink = RawStreamSink(out / f"sample_{i:04d}.raw",
                             bundle.config.volume_shape)
        t0 = time.time()
        try:
            pipeline.synthesize_volume(bundle, seed, label=label,
                                       refine=not args.no_refine, sink=sink)
        except Exception:
            sink.abort()
            raise
        wall = time.time() - t0
        peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024
        rows.append(f"{i},{seed},{wall:.2f},{peak}")
        print(f"sample {i}: seed={seed} {wall:.1f}s")
    (out / "summary.csv").write_text("\n".join(rows) + "\n")
    return 0


def _volumes_in(directory: Path):
    files = sorted(p for p in directory.glob("*.raw")
                   if not p.stem.endswith("_labels"))
    vols, skipped = [], 0
    ref_shape = None
    for p in files:
        v = load_volume(p)
        if ref_shape is None:
            ref_shape = v.shape
        if v.shape != ref_shape:
            print(f"warning: skipping {p} (shape {v.shape} != {ref_shape})",
                  file=sys.stderr)
            skipped += 1
            continue
        vols.append(v)
    return vols, skipped


def cmd_eval(args, extras) -> int:
    if extras:
        raise ValidationError(f"eval does not take config overrides: {extras}")
    real_dir, syn_dir = Path(args.real), Path(args.syn)
    for d in (real_dir, syn_dir):
        if not d.is_dir():
            raise ValidationError(f"not a directory: {d}")
    real, _ = _volumes_in(real_dir)
    syn, _ = _volumes_in(syn_dir)
    if not real or not syn:
        raise ValidationError("eval needs at least one volume in each directory")

    intra = metrics.slice_fid(real, syn, axis="intra")
    inter = metrics.slice_fid(real, syn, axis="inter")
    tv_syn = [metrics.total_variation(v) for v in syn]
    tv_real = [metrics.total_variation(v) for v in real]

    out = Path(args.out or "metrics")
    out.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"real volumes: {len(real)} ({real_dir})",
        f"synthetic volumes: {len(syn)} ({syn_dir})",
        f"Intra-FID (proxy): {intra.value:.6f}",
        f"Inter-FID (proxy): {inter.value:.6f}",
        f"TV synthetic: {np.mean(tv_syn):.6f} +/- {np.std(tv_syn):.6f}",
        f"TV real: {np.mean(tv_real):.6f} +/- {np.std(tv_real):.6f}",
    ]
    report = "\n".join(lines)
    print(report)
    Path(f"{out}.txt").write_text(report + "\n")
    csv = ("metric,value,spread\n"
           f"intra_fid,{intra.value:.6f},\n"
           f"inter_fid,{inter.value:.6f},\n"
           f"tv_syn,{np.mean(tv_syn):.6f},{np.std(tv_syn):.6f}\n"
           f"tv_real,{np.mean(tv_real):.6f},{np.std(tv_real):.6f}\n")
    Path(f"{out}.csv").write_text(csv)
    return 0


def cmd_profile(args, extras) -> int:
    if args.manifest:
        bundle_cfg = pipeline.load_bundle(args.manifest).config
        cfg = bundle_cfg if not extras else RunConfig.from_dict(
            {**{k: getattr(bundle_cfg, k) for k in bundle_cfg.to_dict()},
             **_parse_overrides(extras)})
        manifest = args.manifest
    else:
        cfg = _build_config(args, extras)
        manifest = None
    ladder = [int(x) for x in str(args.ladder).split(",") if x]
    if not ladder:
        raise ValidationError("profile needs a non-empty --ladder")
    reports = memprof.profile_ladder(args.task, ladder, cfg, manifest,
                                     measure=not args.no_measure)
    csv = memprof.reports_csv(reports)
    out = Path(args.out or "memory_profile.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(csv)
    print(csv, end="")
    print(f"wrote {out}")
    return 0


# ----------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="volsynth",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-phantoms", help="write a procedural phantom dataset")
    g.add_argument("--config")
    g.add_argument("--out")
    g.add_argument("--count", type=int, default=20)
    g.add_argument("--seed", type=int, default=None)
    g.set_defaults(func=cmd_gen_phantoms)

    t = sub.add_parser("train", help="train one stage")
    t.add_argument("--config")
    t.add_argument("--stage", required=True)
    t.add_argument("--data")
    t.add_argument("--ckpt-dir")
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="synthesize volumes from a bundle")
    s.add_argument("--manifest", required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-refine", action="store_true",
                   help="skip the slice diffusion refiner (ablation path)")
    s.add_argument("--label", help="label volume for conditional synthesis")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="metrics report between two volume dirs")
    e.add_argument("real")
    e.add_argument("syn")
    e.add_argument("--out", help="report path prefix (default: metrics)")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("profile", help="peak-memory ladder across strategies")
    pr.add_argument("--manifest")
    pr.add_argument("--config")
    pr.add_argument("--ladder", default="32,64,128")
    pr.add_argument("--task", default="decode", choices=memprof.TASKS)
    pr.add_argument("--no-measure", action="store_true",
                    help="analytic accounting only (no subprocess runs)")
    pr.add_argument("--out")
    pr.add_argument("--seed", type=int, default=None)
    pr.set_defaults(func=cmd_profile)
    return p


def main(argv=None) -> int:
    parser = make_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        return args.func(args, extras)
    except VolsynthError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        return 130


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
