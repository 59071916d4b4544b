"""Command-line front end.

Exit status is 0 on success, 1 on a usage error and 2 when the input data
cannot be processed.
"""

import argparse
import logging
import os
import sys

import numpy as np

from . import fileio
from .config import PipelineConfig, load_config
from .k3dm import FitError, augment, build_model, fit, load_model, save_model, transfer_landmarks
from .mesh import Mesh, MeshError
from .synth import (SyntheticFamily, evaluate_correspondence, export_morph, generate_family,
                    make_template)

logger = logging.getLogger("facecorr")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# config keys exposed as flags on the pipeline subcommands
_PIPELINE_FLAGS = {
    "correspond": ["delta", "subsample_step", "t_k", "kq_factor", "n_q", "t_1", "max_iters",
                   "patch_width", "descriptor_radius", "normalization", "area_factor",
                   "radius_step", "arc_step"],
    "preprocess": ["crop_radius", "grid_spacing", "smoothing_weight", "max_pose_iters"],
    "build-model": ["energy"],
    "fit": ["lam", "eps_f", "fit_iters"],
    "augment": ["energy", "lam", "eps_f"],
    "landmarks": ["lam", "eps_f", "fit_iters"],
    "synth": ["n_faces", "warp_magnitude", "seed"],
    "morph": [],
    "evaluate": [],
}


def _add_config_flags(p, keys):
    types = {f: type(getattr(PipelineConfig(), f)) for f in keys}
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--workers", type=int, help="worker threads (0 = all CPUs)")
    for key in keys:
        flag = "--" + key.replace("_", "-")
        p.add_argument(flag, dest=key, type=types[key], metavar=key.upper())


def build_parser():
    parser = _Parser(prog="facecorr", description="Dense 3D face correspondence and deformable models.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("preprocess", help="pose-normalise, crop and fill scans")
    p.add_argument("inputs", nargs="+")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--no-resample", action="store_true", help="pose-normalise only")
    p.add_argument("--nose", help="manual nose tip 'x,y,z' (single input only)")

    p = sub.add_parser("correspond", help="dense correspondence over a set of faces")
    p.add_argument("inputs", nargs="+")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--no-fill", action="store_true", help="skip the level-set fill")

    p = sub.add_parser("build-model", help="deformable model from a correspondence directory")
    p.add_argument("correspondences")
    p.add_argument("-o", "--output", required=True, help="model file")

    p = sub.add_parser("fit", help="fit a model to a query mesh")
    p.add_argument("model")
    p.add_argument("query")
    p.add_argument("-o", "--output", help="output directory for alpha.csv and registered.ply")

    p = sub.add_parser("augment", help="add new faces to a model")
    p.add_argument("model")
    p.add_argument("inputs", nargs="+", help="new face meshes")
    p.add_argument("--train", required=True, help="correspondence directory the model was built from")
    p.add_argument("-o", "--output", required=True, help="output directory")

    p = sub.add_parser("landmarks", help="transfer annotated model points onto a query")
    p.add_argument("model")
    p.add_argument("query")
    p.add_argument("--annotations", required=True, help="CSV of name,point_index")
    p.add_argument("--on-surface", action="store_true", help="report registered query points")
    p.add_argument("-o", "--output", help="landmark CSV (stdout when omitted)")

    p = sub.add_parser("evaluate", help="ground-truth error of a correspondence on a synthetic family")
    p.add_argument("correspondences")
    p.add_argument("--family", required=True, help="directory written by 'synth'")
    p.add_argument("-o", "--output", help="output directory for the report")

    p = sub.add_parser("synth", help="generate a synthetic face family")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--n", dest="n_faces", type=int, metavar="N_FACES")

    p = sub.add_parser("morph", help="interpolate between two shape-parameter vectors")
    p.add_argument("model")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--source", help="alpha CSV of the first frame")
    p.add_argument("--target", help="alpha CSV of the last frame")
    p.add_argument("--steps", type=int, default=10)

    for name, keys in _PIPELINE_FLAGS.items():
        sp = sub.choices[name]
        _add_config_flags(sp, [k for k in keys if not (name == "synth" and k == "n_faces")])
    return parser


def _config(args, keys):
    overrides = {k: getattr(args, k, None) for k in keys}
    overrides["workers"] = args.workers
    if getattr(args, "n_faces", None) is not None:
        overrides["n_faces"] = args.n_faces
    return load_config(args.config, overrides)


def _write_alpha(path, alpha):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("component,alpha\n")
        for i, a in enumerate(alpha):
            fh.write(f"{i},{a:.17g}\n")


def _read_alpha(path, n):
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    alpha = np.zeros(n)
    idx = table[:, 0].astype(int)
    if np.any(idx < 0) or np.any(idx >= n):
        raise ValueError(f"{path}: component index out of range")
    alpha[idx] = table[:, 1]
    return alpha


def _read_family(directory):
    template = fileio.read_mesh(os.path.join(directory, "template.ply"))
    names = sorted(n for n in os.listdir(directory) if n.startswith("face_") and n.endswith(".ply"))
    members = [fileio.read_mesh(os.path.join(directory, n)) for n in names]
    landmarks = {}
    path = os.path.join(directory, "landmarks.csv")
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            for line in fh.read().splitlines()[1:]:
                name, idx = line.split(",")
                landmarks[name] = int(idx)
    return SyntheticFamily(template, landmarks, members)


def _cmd_preprocess(args, cfg):
    from .preprocess import preprocess

    if args.nose is not None and len(args.inputs) != 1:
        raise UsageError("--nose needs exactly one input")
    nose = None if args.nose is None else np.array([float(x) for x in args.nose.split(",")])
    os.makedirs(args.output, exist_ok=True)
    for path in args.inputs:
        out = preprocess(fileio.read_mesh(path), cfg.preprocess_config(), nose, not args.no_resample)
        dest = os.path.join(args.output, os.path.splitext(os.path.basename(path))[0] + ".ply")
        fileio.write_mesh(out, dest)
        print(f"{dest}: {len(out.vertices)} vertices, {len(out.triangles)} triangles")


def _cmd_correspond(args, cfg):
    from dataclasses import replace

    from .pipeline import correspond

    if len(args.inputs) < 2:
        raise UsageError("correspond needs at least two meshes")
    if args.no_fill:
        cfg = replace(cfg, fill=False)
    faces = [fileio.read_mesh(p) for p in args.inputs]
    res = correspond(faces, cfg)
    out = res.correspondences
    fileio.write_correspondences(out, args.output)
    with open(os.path.join(args.output, "tree.txt"), "w", encoding="utf-8") as fh:
        fh.write(res.tree.to_text())
    with open(os.path.join(args.output, "sparse.csv"), "w", encoding="utf-8") as fh:
        fh.write(res.sparse.to_csv())
    with open(os.path.join(args.output, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())
    counts = np.bincount(out.kinds, minlength=3)
    print(f"points: {out.n_points} (sparse {counts[0]}, keypoint {counts[1]}, level-set {counts[2]})")
    print(f"triangles: {len(out.triangles)}")
    print(f"cost max: {out.costs.max() if out.n_points else 0.0:.6g}")
    print(f"cost mean: {out.costs.mean() if out.n_points else 0.0:.6g}")


def _cmd_build_model(args, cfg):
    data = fileio.read_correspondences(args.correspondences)
    model = build_model(data, cfg.energy)
    parent = os.path.dirname(os.path.abspath(args.output))
    os.makedirs(parent, exist_ok=True)
    save_model(model, args.output)
    print(f"points: {model.n_points}, faces: {model.n_faces}, components: {model.n_components}")
    print(f"retained energy: {model.retained_energy:.6f}")


def _fit(args, cfg):
    model = load_model(args.model)
    query = fileio.read_mesh(args.query)
    return model, fit(model, query, cfg.lam, cfg.eps_f, cfg.fit_iters)


def _cmd_fit(args, cfg):
    model, res = _fit(args, cfg)
    print(f"iterations: {res.iterations}")
    print(f"residual: {res.residual:.6e}")
    print(f"inliers: {int(res.inlier_mask.sum())}/{len(res.inlier_mask)}")
    if args.output:
        os.makedirs(args.output, exist_ok=True)
        _write_alpha(os.path.join(args.output, "alpha.csv"), res.alpha)
        fileio.write_ply(Mesh(res.registered_query, model.triangles), os.path.join(args.output, "registered.ply"))
        fileio.write_ply(Mesh(res.instance, model.triangles), os.path.join(args.output, "instance.ply"))
        with open(os.path.join(args.output, "residuals.csv"), "w", encoding="utf-8") as fh:
            fh.write("iteration,residual\n")
            fh.writelines(f"{i + 1},{r:.17g}\n" for i, r in enumerate(res.residual_trace))


def _cmd_augment(args, cfg):
    model = load_model(args.model)
    source = fileio.read_correspondences(args.train)
    new = [fileio.read_mesh(p) for p in args.inputs]
    out, report = augment(model, source, new, cfg.energy, cfg.lam, cfg.eps_f, return_report=True)
    os.makedirs(args.output, exist_ok=True)
    save_model(out, os.path.join(args.output, "model.k3dm"))
    with open(os.path.join(args.output, "augment.csv"), "w", encoding="utf-8") as fh:
        fh.write("input,status\n")
        for k, path in enumerate(args.inputs):
            status = "installed" if k in report.installed else f"skipped: {report.skipped.get(k, '')}"
            fh.write(f"{path},{status}\n")
    print(f"installed: {len(report.installed)}/{len(new)}, components: {out.n_components}")
    if not report.installed:
        raise FitError("no face could be installed")


def _cmd_landmarks(args, cfg):
    ann = []
    with open(args.annotations, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#") or line.lower().startswith("name,"):
                continue
            try:
                name, idx = line.split(",")
                ann.append((name.strip(), int(idx)))
            except ValueError:
                raise fileio.ParseError(f"{args.annotations}: line {lineno}: expected name,index") from None
    _, res = _fit(args, cfg)
    marks = transfer_landmarks(load_model(args.model), ann, res, args.on_surface)
    text = "name,x,y,z\n" + "".join(f"{n},{p[0]:.9f},{p[1]:.9f},{p[2]:.9f}\n" for n, p in marks.items())
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _cmd_evaluate(args, cfg):
    family = _read_family(args.family)
    result = fileio.read_correspondences(args.correspondences)
    if result.n_faces > len(family.members):
        raise ValueError("correspondence has more faces than the family")
    report = evaluate_correspondence(family, result, family.members[:result.n_faces])
    sys.stdout.write(report.summary())
    if args.output:
        os.makedirs(args.output, exist_ok=True)
        with open(os.path.join(args.output, "errors.csv"), "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
        with open(os.path.join(args.output, "summary.txt"), "w", encoding="utf-8") as fh:
            fh.write(report.summary())
        with open(os.path.join(args.output, "cumulative.csv"), "w", encoding="utf-8") as fh:
            fh.write("distance_mm,percent_within\n")
            fh.writelines(f"{d:g},{c:.6f}\n" for d, c in zip(report.thresholds, report.cumulative))


def _cmd_synth(args, cfg):
    template, landmarks = make_template()
    family = generate_family(template, cfg.n_faces, cfg.warp_magnitude, cfg.seed, landmarks)
    os.makedirs(args.output, exist_ok=True)
    fileio.write_ply(template, os.path.join(args.output, "template.ply"))
    for k, m in enumerate(family.members):
        fileio.write_ply(m, os.path.join(args.output, f"face_{k:03d}.ply"))
    with open(os.path.join(args.output, "landmarks.csv"), "w", encoding="utf-8") as fh:
        fh.write("name,vertex\n")
        fh.writelines(f"{k},{v}\n" for k, v in sorted(landmarks.items()))
    with open(os.path.join(args.output, "warps.csv"), "w", encoding="utf-8") as fh:
        fh.write("member,magnitude,rotation(9),translation(3),displacements(75)\n")
        for k, w in enumerate(family.warps):
            vals = np.concatenate([[w["magnitude"]], np.ravel(w["rotation"]), w["translation"],
                                   np.ravel(w["displacements"])])
            fh.write(f"{k}," + ",".join(f"{x:.17g}" for x in vals) + "\n")
    print(f"{cfg.n_faces} faces, {len(template.vertices)} vertices each, seed {cfg.seed}")


def _cmd_morph(args, cfg):
    model = load_model(args.model)
    n = model.n_components
    if n == 0 and (args.source is None or args.target is None):
        raise ValueError("model has no components")
    if args.steps < 2:
        raise UsageError("--steps must be at least 2")
    default = np.zeros(n)
    if n:
        default[0] = 2.0 * np.sqrt(model.spectrum[0])
    a0 = -default if args.source is None else _read_alpha(args.source, n)
    a1 = default if args.target is None else _read_alpha(args.target, n)
    frames = export_morph(model, a0, a1, args.steps)
    os.makedirs(args.output, exist_ok=True)
    for k, m in enumerate(frames):
        fileio.write_ply(m, os.path.join(args.output, f"frame_{k:03d}.ply"))
    print(f"{len(frames)} frames written")


_COMMANDS = {
    "preprocess": _cmd_preprocess,
    "correspond": _cmd_correspond,
    "build-model": _cmd_build_model,
    "fit": _cmd_fit,
    "augment": _cmd_augment,
    "landmarks": _cmd_landmarks,
    "evaluate": _cmd_evaluate,
    "synth": _cmd_synth,
    "morph": _cmd_morph,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(sys.argv[1:] if argv is None else argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "facecorr: error: a subcommand is required")
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _config(args, _PIPELINE_FLAGS[args.command])
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (KeyError, ValueError, OSError) as exc:
        print(f"facecorr: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        _COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"facecorr {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MeshError, FitError, ValueError, IndexError, OSError, np.linalg.LinAlgError) as exc:
        print(f"facecorr {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
