"""Batch command-line interface.

Subcommands: generate, train, infer, eval, baseline, import-diligent.
Outputs are files; all randomness flows from --seed; errors exit nonzero
with a single diagnostic line on stderr.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import dataio, evalkit, geomgen, msnet, render as rendermod
from .classic import l2_normals
from .samples import NormalMap


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pstereo", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render synthetic training samples")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--count", type=int, required=True, help="number of samples")
    g.add_argument("--seed", type=int, required=True, help="master seed")
    g.add_argument("--mesh", default=None, help="OBJ mesh instead of procedural blobs")
    g.add_argument("--lights", type=int, default=100, help="lights per sample (default 100)")
    g.add_argument("--res", type=int, default=128, help="image resolution (default 128)")

    t = sub.add_parser("train", help="train the multi-scale network")
    t.add_argument("--data", nargs="+", required=True, help="sample directories (or parents)")
    t.add_argument("--out", required=True, help="checkpoint path (loss CSV lands next to it)")
    t.add_argument("--steps", type=int, required=True)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--batch", type=int, default=3)
    t.add_argument("--patch", type=int, default=128)
    t.add_argument("--patches", type=int, default=32, help="patches drawn per sample per epoch")
    t.add_argument("--seed", type=int, default=0)

    i = sub.add_parser("infer", help="multi-scale inference on one sample")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--sample", required=True)
    i.add_argument("--out", required=True, help="output normal map (PFM)")
    i.add_argument("--r0", type=int, default=None, help="coarsest resolution (default: checkpoint)")

    b = sub.add_parser("baseline", help="least-squares baseline on one sample")
    b.add_argument("--sample", required=True)
    b.add_argument("--out", required=True, help="output normal map (PFM)")

    e = sub.add_parser("eval", help="mean angular error between normal maps")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--mask", required=True)
    e.add_argument("--report", default=None, help="append object,method,mae_deg to this CSV")

    d = sub.add_parser("import-diligent", help="convert a benchmark directory to canonical form")
    d.add_argument("--in", dest="src", required=True)
    d.add_argument("--out", required=True)
    return p


def _cmd_generate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base_mesh = geomgen.load_obj(args.mesh) if args.mesh else None
    for idx in range(args.count):
        rng = np.random.default_rng([args.seed, idx])
        mesh = base_mesh if base_mesh is not None else geomgen.marching_cubes(
            geomgen.sample_blob_field(rng)
        )
        material = rendermod.sample_material(rng)
        lights = rendermod.sample_lights(rng, args.lights)
        job = rendermod.RenderJob(mesh, material, lights, resolution=(args.res, args.res),
                                  seed=args.seed)
        sample = rendermod.render(job)
        dataio.write_sample(
            out / f"sample_{idx:05d}",
            sample,
            generator={
                "seed": args.seed,
                "index": idx,
                "material_category": material.category,
                "mesh_source": args.mesh or "blob",
            },
        )
    print(f"wrote {args.count} samples to {out}")
    return 0


def _collect_samples(paths):
    sample_dirs = []
    for p in map(Path, paths):
        if (p / "manifest.json").exists():
            sample_dirs.append(p)
        elif p.is_dir():
            found = sorted(d for d in p.iterdir() if (d / "manifest.json").exists())
            if not found:
                raise FileNotFoundError(f"no sample directories under {p}")
            sample_dirs.extend(found)
        else:
            raise FileNotFoundError(f"no such sample directory: {p}")
    return [dataio.read_sample(d) for d in sample_dirs]


def _cmd_train(args) -> int:
    samples = _collect_samples(args.data)
    weights = msnet.init_weights(msnet.NetConfig(), seed=args.seed)
    params = msnet.TrainParams(
        steps=args.steps, lr=args.lr, batch=args.batch, patch=args.patch,
        patches_per_sample=args.patches, seed=args.seed,
        log_every=max(1, args.steps // 20),
    )
    _, trace = msnet.train(weights, samples, params=params)
    msnet.save_weights(args.out, weights)
    dataio.save_loss_trace(str(args.out) + ".loss.csv", trace)
    print(f"wrote {args.out} and {args.out}.loss.csv")
    return 0


def _cmd_infer(args) -> int:
    weights = msnet.load_weights(args.ckpt)
    if args.r0 is not None:
        weights.config = replace(weights.config, r0=args.r0)
    sample = dataio.read_sample(args.sample)
    h, w = sample.resolution
    schedule = msnet.resolution_schedule(h, w, weights.config.r0)
    print(f"stages: 1 coarse + {len(schedule) - 1} refine")
    normals = msnet.forward_multiscale(weights, sample)
    dataio.write_pfm(args.out, normals.values)
    print(f"wrote {args.out}")
    return 0


def _cmd_baseline(args) -> int:
    sample = dataio.read_sample(args.sample)
    normals, _ = l2_normals(sample)
    dataio.write_pfm(args.out, normals.values)
    print(f"wrote {args.out}")
    return 0


def _load_normal_map(pfm_path, mask):
    vals = dataio.read_pfm(pfm_path)
    if vals.ndim != 3:
        raise ValueError(f"{pfm_path}: expected a 3-channel normal map")
    valid = mask & (np.linalg.norm(vals, axis=-1) > 1e-8)
    return NormalMap(dataio._renormalize(vals, valid), valid)


def _cmd_eval(args) -> int:
    mask = dataio.read_pgm(args.mask)
    pred = _load_normal_map(args.pred, mask)
    gt = _load_normal_map(args.gt, mask)
    mae = evalkit.mean_angular_error(pred, gt)
    print(f"{mae:.6f}")
    if args.report:
        report = Path(args.report)
        obj = Path(args.gt).resolve().parent.name
        method = Path(args.pred).stem
        line = f"{obj},{method},{mae:.6f}\n"
        if report.exists():
            report.write_text(report.read_text() + line)
        else:
            report.write_text("object,method,mae_deg\n" + line)
    return 0


def _cmd_import_diligent(args) -> int:
    sample = dataio.import_diligent(args.src)
    dataio.write_sample(Path(args.out), sample, generator={"mesh_source": str(args.src)})
    print(f"wrote {args.out} (K={sample.k})")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "baseline": _cmd_baseline,
    "eval": _cmd_eval,
    "import-diligent": _cmd_import_diligent,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FloatingPointError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
