"""Command-line entry point: ``isoinr <subcommand> ...``.

Every run writes a JSON manifest next to its primary output. Failures print
one line ``isoinr: error[CODE]: message`` to stderr, remove any partial
outputs and exit 1; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import __version__
from .errors import IsoInrError
from .model import load_model, save_model
from .nifti import read_nifti, write_nifti
from .phantom import PRESETS, PhantomSpec, generate
from .resample import IsoGridSpec, assemble_atlas, downsample_labels, model_frame, sample_inr
from .stats import (
    dice,
    glm_group_test,
    longitudinal_stability,
    read_cohort,
    read_pairs,
    write_group_csv,
    write_stability_csv,
)
from .thickness import thickness_map
from .train import TrainConfig, build_domain, fit, write_loss_csv
from .volume import harmonize_bbox, read_label_table, write_label_table

log = logging.getLogger("isoinr")

_DEFAULTS = TrainConfig()


class UsageError(Exception):
    pass


class Outputs:
    """Tracks files written by one invocation so a failure can remove them."""

    def __init__(self):
        self.paths = []
        self.dirs = []

    def file(self, path) -> Path:
        p = Path(path)
        if not p.exists():
            self.paths.append(p)
        return p

    def directory(self, path) -> Path:
        p = Path(path)
        if not p.exists():
            p.mkdir(parents=True)
            self.dirs.append(p)
        return p

    def cleanup(self):
        for p in self.paths:
            try:
                p.unlink()
            except FileNotFoundError:
                pass
        for d in reversed(self.dirs):
            try:
                d.rmdir()
            except OSError:
                pass


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_manifest(path, args, inputs, seed, t0, out: Outputs, extra=None):
    config = {k: v for k, v in vars(args).items() if k not in ("func", "config", "quiet")}
    manifest = {
        "subcommand": args.command if not getattr(args, "stats_command", None) else f"stats {args.stats_command}",
        "config": config,
        "inputs": {str(p): _digest(p) for p in inputs if p},
        "version": __version__,
        "seed": seed,
        "duration_s": round(time.perf_counter() - t0, 3),
    }
    if extra:
        manifest.update(extra)
    p = out.file(path)
    p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _labels_from(path):
    return read_label_table(path) if path else None


# --- subcommands ------------------------------------------------------------


def cmd_phantom_gen(args, out: Outputs, t0):
    overrides = {}
    if args.wall is not None:
        overrides["wall"] = args.wall
    if args.t2_dims is not None:
        overrides["t2_dims"] = tuple(args.t2_dims)
    if args.noise is not None:
        overrides["noise_sigma"] = args.noise
    spec = PhantomSpec(preset=args.preset, seed=args.seed, **overrides)
    ph = generate(spec)
    d = out.directory(args.out)
    write_nifti(ph.t1, out.file(d / "t1.nii"))
    write_nifti(ph.t2, out.file(d / "t2.nii"))
    write_nifti(ph.seg_aniso, out.file(d / "seg_aniso.nii"))
    write_nifti(ph.truth_at(args.truth_spacing), out.file(d / "seg_truth.nii"))
    write_label_table(ph.label_table, out.file(d / "labels.json"))
    extra = {
        "phantom": spec.to_dict(),
        "analytic_thickness_mm": {str(k): v for k, v in ph.analytic_thickness.items()},
    }
    _write_manifest(d / "manifest.json", args, [], args.seed, t0, out, extra)


def cmd_fit(args, out: Outputs, t0):
    table = read_label_table(args.labels)
    t1 = read_nifti(args.t1, as_labels=False)
    t2 = read_nifti(args.t2, as_labels=False)
    seg = read_nifti(args.seg, label_table=table, as_labels=True)
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        dropout_p=args.dropout,
        sigma_b=args.sigma_b,
        seed=args.seed,
        log_every=args.log_every,
        n_fourier=args.n_fourier,
        width=args.width,
    )
    domain = build_domain(harmonize_bbox(t1, t2, fill=args.fill), t2, seg)
    result = fit(domain, cfg)
    model_path = out.file(args.out)
    save_model(result.model, model_path)
    loss_csv = args.loss_csv or str(Path(args.out).with_suffix(".loss.csv"))
    write_loss_csv(result.trace, out.file(loss_csv))
    _write_manifest(
        str(args.out) + ".manifest.json", args, [args.t1, args.t2, args.seg, args.labels], args.seed, t0, out,
        {"train_config": cfg.to_dict(), "loss_csv": loss_csv, "batches_per_epoch": result.batches_per_epoch},
    )


def cmd_upsample(args, out: Outputs, t0):
    m = load_model(args.model)
    frame = model_frame(m)
    ref = read_nifti(args.bbox_from, as_labels=False) if args.bbox_from else frame
    grid = IsoGridSpec(args.spacing, ref).grid()
    want_images = args.out_t1 or args.out_t2
    inputs = [args.model, args.bbox_from]
    if want_images and args.images == "linear":
        if not (args.t1 and args.t2):
            raise UsageError("--images linear needs the source --t1 and --t2 volumes")
        t1 = read_nifti(args.t1, as_labels=False)
        t2 = read_nifti(args.t2, as_labels=False)
        seg, t1_iso, t2_iso = assemble_atlas(m, t1, t2, grid)
        inputs += [args.t1, args.t2]
    else:
        outputs = ("seg",) + (("t1", "t2") if want_images else ())
        res = sample_inr(m, grid, outputs=outputs)
        seg, t1_iso, t2_iso = res["seg"], res.get("t1"), res.get("t2")
    write_nifti(seg, out.file(args.out_seg))
    if args.out_t1:
        write_nifti(t1_iso, out.file(args.out_t1))
    if args.out_t2:
        write_nifti(t2_iso, out.file(args.out_t2))
    _write_manifest(str(args.out_seg) + ".manifest.json", args, inputs, m.seed, t0, out, {"grid_dims": list(grid.dims)})


def cmd_downsample(args, out: Outputs, t0):
    table = _labels_from(args.labels)
    seg = read_nifti(args.input, label_table=table, as_labels=True)
    ref = read_nifti(args.ref, as_labels=False)
    res = downsample_labels(seg, ref)
    write_nifti(res, out.file(args.out))
    _write_manifest(str(args.out) + ".manifest.json", args, [args.input, args.ref, args.labels], None, t0, out)


def cmd_thickness(args, out: Outputs, t0):
    table = read_label_table(args.labels)
    seg = read_nifti(args.seg, label_table=table, as_labels=True)
    targets = args.target if args.target else None
    res = thickness_map(seg, targets, prune_ratio=args.prune, min_kink=args.min_kink, jobs=args.jobs, with_map=bool(args.map))
    p = out.file(args.out)
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label_id", "label_name", "n_voxels", "n_skeleton", "median_thickness_mm"])
        for k, lt in res.labels.items():
            w.writerow([k, lt.name, lt.n_voxels, lt.n_skeleton, "" if lt.median_mm is None else repr(lt.median_mm)])
    if args.map:
        write_nifti(res.thickness_map, out.file(args.map))
    _write_manifest(str(args.out) + ".manifest.json", args, [args.seg, args.labels], None, t0, out)


def cmd_dice(args, out: Outputs, t0):
    table = read_label_table(args.labels)
    a = read_nifti(args.a, label_table=table, as_labels=True)
    b = read_nifti(args.b, label_table=table, as_labels=True)
    p = out.file(args.out)
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label_id", "label_name", "dice"])
        for k, name in table:
            if k == 0 and not args.include_background:
                continue
            w.writerow([k, name, repr(dice(a, b, k))])
    _write_manifest(str(args.out) + ".manifest.json", args, [args.a, args.b, args.labels], None, t0, out)


def _map_regions(fn, regions, jobs):
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(fn, regions))
    return [fn(r) for r in regions]


def cmd_stats_group(args, out: Outputs, t0):
    table = read_cohort(args.table)
    regions = args.region or table.regions
    results = _map_regions(lambda r: glm_group_test(table, r), regions, args.jobs)
    write_group_csv(results, out.file(args.out))
    _write_manifest(str(args.out) + ".manifest.json", args, [args.table], None, t0, out)


def cmd_stats_longitudinal(args, out: Outputs, t0):
    table = read_pairs(args.table)
    regions = args.region or table.regions
    results = _map_regions(lambda r: longitudinal_stability(table, r), regions, args.jobs)
    write_stability_csv(results, out.file(args.out))
    _write_manifest(str(args.out) + ".manifest.json", args, [args.table], None, t0, out)


# --- parser -------------------------------------------------------------------


def _common(p):
    p.add_argument("--config", help="JSON config (or a previous run manifest); flags override it")
    p.add_argument("--quiet", action="store_true", help="only log warnings")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="isoinr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"isoinr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="synthetic patch pairs")
    phs = ph.add_subparsers(dest="phantom_command", required=True)
    gen = phs.add_parser("gen", help="generate a phantom")
    gen.add_argument("--preset", choices=PRESETS, default="shell")
    gen.add_argument("--out", required=True, help="output directory")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--wall", type=float, default=None, help="shell wall thickness (mm)")
    gen.add_argument("--t2-dims", type=int, nargs=3, default=None, metavar=("NX", "NY", "NZ"))
    gen.add_argument("--noise", type=float, default=None, help="Gaussian noise sigma")
    gen.add_argument("--truth-spacing", type=float, default=0.4, help="isotropic spacing of seg_truth.nii")
    _common(gen)
    gen.set_defaults(func=cmd_phantom_gen)

    f = sub.add_parser("fit", help="fit an INR to a T1/T2/segmentation patch triple")
    f.add_argument("--t1", required=True)
    f.add_argument("--t2", required=True)
    f.add_argument("--seg", required=True)
    f.add_argument("--labels", required=True, help="label table JSON")
    f.add_argument("--out", required=True, help="model file (.inrm)")
    f.add_argument("--loss-csv", default=None, help="default: <out>.loss.csv")
    f.add_argument("--epochs", type=int, default=_DEFAULTS.epochs)
    f.add_argument("--batch", type=int, default=_DEFAULTS.batch_size)
    f.add_argument("--lr", type=float, default=_DEFAULTS.lr)
    f.add_argument("--sigma-b", type=float, default=_DEFAULTS.sigma_b)
    f.add_argument("--dropout", type=float, default=_DEFAULTS.dropout_p)
    f.add_argument("--seed", type=int, default=_DEFAULTS.seed)
    f.add_argument("--n-fourier", type=int, default=_DEFAULTS.n_fourier)
    f.add_argument("--width", type=int, default=_DEFAULTS.width)
    f.add_argument("--fill", type=float, default=0.0, help="T1 padding value outside its coverage")
    f.add_argument("--log-every", type=int, default=_DEFAULTS.log_every)
    _common(f)
    f.set_defaults(func=cmd_fit)

    u = sub.add_parser("upsample", help="sample a fitted INR on an isotropic grid")
    u.add_argument("--model", required=True)
    u.add_argument("--spacing", type=float, default=0.4)
    u.add_argument("--out-seg", required=True)
    u.add_argument("--out-t1", default=None)
    u.add_argument("--out-t2", default=None)
    u.add_argument("--images", choices=("inr", "linear"), default="linear")
    u.add_argument("--t1", default=None, help="source T1 (for --images linear)")
    u.add_argument("--t2", default=None, help="source T2 (for --images linear)")
    u.add_argument("--bbox-from", default=None, help="volume whose box defines the grid (default: training T2)")
    _common(u)
    u.set_defaults(func=cmd_upsample)

    d = sub.add_parser("downsample-labels", help="majority-vote labels onto a coarser grid")
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--ref", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--labels", default=None)
    _common(d)
    d.set_defaults(func=cmd_downsample)

    t = sub.add_parser("thickness", help="per-label median thickness")
    t.add_argument("--seg", required=True)
    t.add_argument("--labels", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--prune", type=float, default=0.25)
    t.add_argument("--min-kink", type=float, default=0.5)
    t.add_argument("--target", type=int, nargs="+", default=None, help="label ids (default: all but 0)")
    t.add_argument("--map", default=None, help="optional thickness map NIfTI")
    t.add_argument("--jobs", type=int, default=1)
    _common(t)
    t.set_defaults(func=cmd_thickness)

    dc = sub.add_parser("dice", help="per-label Dice between two label volumes")
    dc.add_argument("--a", required=True)
    dc.add_argument("--b", required=True)
    dc.add_argument("--labels", required=True)
    dc.add_argument("--out", required=True)
    dc.add_argument("--include-background", action="store_true")
    _common(dc)
    dc.set_defaults(func=cmd_dice)

    s = sub.add_parser("stats", help="group and longitudinal statistics")
    ss = s.add_subparsers(dest="stats_command", required=True)
    for name, fn, helptext in (
        ("group", cmd_stats_group, "GLM group test with age covariate + AUC"),
        ("longitudinal", cmd_stats_longitudinal, "annualized SD and total absolute change"),
    ):
        p = ss.add_parser(name, help=helptext)
        p.add_argument("--table", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--region", nargs="+", default=None)
        p.add_argument("--jobs", type=int, default=1)
        _common(p)
        p.set_defaults(func=fn)
    return parser


def _leaf_parser(parser, argv):
    """The subparser that handled ``argv`` (needed to apply config defaults)."""
    node = parser
    for tok in argv:
        actions = [a for a in node._actions if isinstance(a, argparse._SubParsersAction)]
        if not actions:
            break
        if tok in actions[0].choices:
            node = actions[0].choices[tok]
    return node


def _config_path(argv):
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    path = _config_path(argv)
    if path:
        try:
            cfg = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read --config {path}: {exc}")
        if isinstance(cfg, dict) and isinstance(cfg.get("config"), dict):
            cfg = cfg["config"]
        if not isinstance(cfg, dict):
            parser.error("--config must hold a JSON object")
        leaf = _leaf_parser(parser, argv)
        known = {a.dest for a in leaf._actions}
        unknown = sorted(set(cfg) - known - {"command", "phantom_command", "stats_command"})
        if unknown:
            parser.error(f"unknown config keys {unknown}")
        leaf.set_defaults(**{k: v for k, v in cfg.items() if k in known and k not in ("config", "help")})
        # required options may now come from the config
        for a in leaf._actions:
            if a.required and a.dest in cfg:
                a.required = False
    return parser, parser.parse_args(argv)


def main(argv=None) -> int:
    parser, args = parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    out = Outputs()
    t0 = time.perf_counter()
    try:
        args.func(args, out, t0)
    except UsageError as exc:
        out.cleanup()
        parser.error(str(exc))
    except IsoInrError as exc:
        out.cleanup()
        print(f"isoinr: error[{exc.code}]: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        out.cleanup()
        code = "E_IO" if isinstance(exc, OSError) else "E_INPUT"
        print(f"isoinr: error[{code}]: {exc}", file=sys.stderr)
        return 1
    except BaseException:
        out.cleanup()
        raise
    return 0


if __name__ == "__main__":
    sys.exit(main())
