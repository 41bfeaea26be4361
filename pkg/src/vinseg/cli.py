"""``vinseg`` command line: synth -> train -> infer -> ics -> panoptic -> eval.

Exit codes: 0 success, 1 check failed / runtime error, 2 usage error,
3 unreadable or unwritable file, 4 invalid configuration, 5 malformed input file.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io as vio
from .config import Config, ConfigError, load_config
from .head import QueryBatch, has_kink, head_init, query_semantics
from .ics import ics
from .losses import SemanticLossConfig
from .metrics import PanopticCounts, panoptic_counts, report_from_counts
from .panoptic import PanopticCloud, assign_instances
from .synth import Scene, generate_scene, make_rng, perturb_detections
from .trainer import grad_check, train
from .voxel import featurize

EXIT_FAIL, EXIT_USAGE, EXIT_IO, EXIT_CONFIG, EXIT_FORMAT = 1, 2, 3, 4, 5

log = logging.getLogger("vinseg")


class CliError(Exception):
    def __init__(self, message, code=EXIT_FAIL):
        super().__init__(message)
        self.code = code


def _threads(args) -> int:
    if args.threads is not None:
        return max(1, args.threads)
    env = os.environ.get("VIN_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CliError(f"VIN_THREADS must be an integer, got {env!r}", EXIT_USAGE) from None
    return 1


def _pmap(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def _config(args) -> Config:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(
            cfg,
            dataset=dataclasses.replace(cfg.dataset, seed=args.seed),
            train=dataclasses.replace(cfg.train, seed=args.seed),
        )
    return cfg


def scene_paths(directory: Path, stem: str) -> dict:
    return {
        "cloud": directory / f"{stem}.cloud",
        "labels": directory / f"{stem}.labels",
        "boxes": directory / f"{stem}.boxes.json",
        "dets": directory / f"{stem}.dets.json",
    }


def scene_stems(directory: Path) -> list[str]:
    if not directory.is_dir():
        raise CliError(f"{directory}: not a directory", EXIT_IO)
    return sorted(p.name[: -len(".cloud")] for p in directory.glob("*.cloud"))


def load_scene(directory: Path, stem: str) -> Scene:
    p = scene_paths(directory, stem)
    cloud = vio.attach_labels(vio.read_cloud(p["cloud"]), vio.read_labels(p["labels"]))
    return Scene(cloud, vio.read_boxes(p["boxes"]))


def cmd_synth(args, cfg: Config):
    out = Path(args.out)
    ds = cfg.dataset
    jobs = [("train", i, i) for i in range(ds.n_train if args.count is None else args.count)]
    if args.count is None:
        jobs += [("val", i, ds.val_stream_offset + i) for i in range(ds.n_val)]

    def work(job):
        split, i, stream = job
        scene = generate_scene(cfg.scene, ds.seed, stream)
        dets, _ = perturb_detections(scene.boxes, cfg.detections, cfg.taxonomy, ds.seed, stream)
        d = out / split
        p = scene_paths(d, f"scene_{i:04d}")
        vio.write_cloud(p["cloud"], scene.cloud)
        vio.write_labels(p["labels"], scene.cloud.sem_label, np.ones(len(scene.cloud)), scene.cloud.instance)
        vio.write_boxes(p["boxes"], scene.boxes)
        vio.write_boxes(p["dets"], dets)
        return len(scene.cloud)

    for split in {j[0] for j in jobs}:
        (out / split).mkdir(parents=True, exist_ok=True)
    counts = _pmap(work, jobs, _threads(args))
    print(f"wrote {len(jobs)} scenes ({sum(counts)} points) to {out}")


def cmd_train(args, cfg: Config):
    tcfg = cfg.train
    if args.label_fraction is not None:
        tcfg = dataclasses.replace(tcfg, label_fraction=args.label_fraction)
    if args.epochs is not None:
        tcfg = dataclasses.replace(tcfg, epochs=args.epochs)
    threads = _threads(args)
    tdir = Path(args.scenes)
    scenes = _pmap(lambda s: load_scene(tdir, s), scene_stems(tdir), threads)
    if not scenes:
        raise CliError(f"{tdir}: no scenes found", EXIT_IO)
    val = []
    if args.val:
        vdir = Path(args.val)
        val = _pmap(lambda s: load_scene(vdir, s), scene_stems(vdir), threads)
    params, hist = train(scenes, tcfg, cfg.grid, cfg.taxonomy.n_classes, val)
    vio.write_params(args.out, params)
    if args.history:
        Path(args.history).write_text(hist.to_csv())
    last = hist.val_miou[-1] if hist.val_miou else float("nan")
    print(f"trained {tcfg.epochs} epochs; final loss {hist.train_loss[-1]:.6f}; val mIoU {last:.4f}")


def _infer_one(params, cfg, cloud_path: Path, out_path: Path):
    cloud = vio.read_cloud(cloud_path)
    fmap = featurize(cfg.grid, cloud)
    _, labels, scores = query_semantics(params, fmap, cloud.xyz)
    vio.write_labels(out_path, labels, scores, np.zeros(len(cloud), dtype=np.int64))


def cmd_infer(args, cfg: Config):
    params = vio.read_params(args.params)
    src = Path(args.cloud)
    if src.is_dir():
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        stems = scene_stems(src)
        _pmap(lambda s: _infer_one(params, cfg, src / f"{s}.cloud", out / f"{s}.pred.labels"), stems, _threads(args))
        print(f"labelled {len(stems)} clouds into {out}")
    else:
        _infer_one(params, cfg, src, Path(args.out))


def _read_labelled(cloud_path, labels_path):
    return vio.attach_labels(vio.read_cloud(cloud_path), vio.read_labels(labels_path))


def cmd_ics(args, cfg: Config):
    boxes = vio.read_boxes(args.boxes)
    cloud = _read_labelled(args.cloud, args.labels)
    try:
        new_boxes, new_cloud, changes = ics(boxes, cloud, cfg.taxonomy, cfg.ics)
    except ValueError as e:
        raise CliError(str(e), EXIT_FORMAT) from None
    vio.write_boxes(args.out_boxes, new_boxes)
    vio.write_labels(args.out_labels, new_cloud.sem_label, new_cloud.sem_score, new_cloud.instance)
    text = changes.to_text()
    if args.log:
        Path(args.log).write_text(text)
    print(f"ics: {len(changes.box_changes)} box and {len(changes.point_changes)} point label changes")


def cmd_panoptic(args, cfg: Config):
    boxes = vio.read_boxes(args.boxes)
    cloud = _read_labelled(args.cloud, args.labels)
    pan = assign_instances(boxes, cloud, cfg.taxonomy, cfg.panoptic.require_class_match)
    vio.write_labels(args.out, pan.sem_label, cloud.sem_score, pan.instance)


def _label_pairs(pred: Path, gt: Path, suffix: str):
    if gt.is_dir():
        stems = sorted(p.name.split(".")[0] for p in gt.glob("*.labels") if p.name.count(".") == 1)
        if not stems:
            raise CliError(f"{gt}: no label files found", EXIT_IO)
        return [(pred / f"{s}{suffix}", gt / f"{s}.labels") for s in stems]
    return [(pred, gt)]


def cmd_eval(args, cfg: Config):
    pairs = _label_pairs(Path(args.pred), Path(args.gt), args.pred_suffix)

    def one(pair):
        p, g = (vio.read_labels(x) for x in pair)
        if len(p[0]) != len(g[0]):
            raise CliError(f"{pair[0]} has {len(p[0])} points but {pair[1]} has {len(g[0])}", EXIT_FORMAT)
        try:
            return panoptic_counts(PanopticCloud(p[0], p[2]), PanopticCloud(g[0], g[2]), cfg.taxonomy)
        except ValueError as e:
            raise CliError(f"{pair[0]}: {e}", EXIT_FORMAT) from None

    total = PanopticCounts(cfg.taxonomy.n_classes)
    # merge in file order so the result does not depend on --threads
    for c in _pmap(one, pairs, _threads(args)):
        total = total.merge(c)
    report = report_from_counts(total, cfg.taxonomy)
    vio.write_report(args.out, report)
    if args.rows:
        Path(args.rows).write_text(vio.report_rows_csv(vio.report_to_doc(report)))
    agg = report.aggregates()
    print(f"mIoU {agg['miou']:.4f}  fwIoU {agg['fwiou']:.4f}  PQ {agg['pq']:.4f}  PQ† {agg['pq_dagger']:.4f}")


def gradcheck_cases(seed: int, n: int, eps: float = 1e-5):
    """Yield ``(case, loss_kind, rel_err)`` on small random heads and batches."""
    for case in range(n):
        for kind, lam in (("ce", 0.0), ("ce+lovasz", 1.0)):
            for attempt in range(20):
                rng = make_rng(seed, case * 1000 + attempt)
                C, S = int(rng.integers(2, 5)), int(rng.integers(2, 5))
                hidden = tuple(int(h) for h in rng.integers(3, 8, size=4))
                params = head_init(int(rng.integers(1 << 31)), C, S, hidden)
                # non-zero biases so ReLU kinks are not aligned with zero inputs
                for b in params.biases:
                    b += rng.normal(0, 0.1, size=b.shape)
                N = int(rng.integers(3, 9))
                batch = QueryBatch(
                    rng.normal(size=(N, 3)), rng.normal(size=(N, C)), rng.integers(0, S, size=N),
                    rng.uniform(size=N) < 0.85,
                )
                if not has_kink(params, batch, margin=1e-3, lovasz=lam > 0):
                    break
            w = rng.uniform(0.2, 2.0, size=S)
            yield case, kind, grad_check(params, batch, eps, SemanticLossConfig(tuple(w), lam))


def cmd_gradcheck(args, cfg: Config):
    seed = 0 if args.seed is None else args.seed
    worst = 0.0
    for case, kind, err in gradcheck_cases(seed, args.cases, args.eps):
        worst = max(worst, err)
        print(f"case {case:3d} {kind:10s} max rel err {err:.3e}")
    ok = worst < args.tol
    print(f"worst {worst:.3e} -> {'PASS' if ok else 'FAIL'} (tol {args.tol:g})")
    if not ok:
        raise CliError("gradient check failed", EXIT_FAIL)


def cmd_plotdata(args, cfg: Config):
    text = vio.report_rows_csv(vio.read_report(args.report))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="override all configured seeds")
    common.add_argument("--threads", type=int, help="scene-level parallelism (env VIN_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="vinseg", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic scenes")
    p.add_argument("--out", required=True, help="output directory (train/ and val/ inside)")
    p.add_argument("--count", type=int, help="only write this many training scenes")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train the semantic head")
    p.add_argument("--scenes", required=True, help="directory of training scenes")
    p.add_argument("--val", help="directory of validation scenes")
    p.add_argument("--out", required=True, help="params file to write")
    p.add_argument("--history", help="per-epoch history CSV")
    p.add_argument("--label-fraction", type=float, help="override train.label_fraction")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="label clouds with a trained head")
    p.add_argument("--params", required=True)
    p.add_argument("--cloud", required=True, help="cloud file or scene directory")
    p.add_argument("--out", required=True, help="label file, or directory when --cloud is one")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ics", parents=[common], help="repair box and point labels")
    p.add_argument("--boxes", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out-boxes", required=True)
    p.add_argument("--out-labels", required=True)
    p.add_argument("--log", help="change log text file")
    p.set_defaults(func=cmd_ics)

    p = sub.add_parser("panoptic", parents=[common], help="assign box instance ids to points")
    p.add_argument("--boxes", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_panoptic)

    p = sub.add_parser("eval", parents=[common], help="semantic and panoptic metrics")
    p.add_argument("--pred", required=True, help="label file or directory")
    p.add_argument("--gt", required=True, help="label file or directory")
    p.add_argument("--pred-suffix", default=".pred.labels", help="prediction file suffix in directory mode")
    p.add_argument("--out", required=True, help="report JSON")
    p.add_argument("--rows", help="per-class rows as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--cases", type=int, default=20)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plotdata", parents=[common], help="per-class metric rows from a report")
    p.add_argument("--report", required=True)
    p.add_argument("--out", help="CSV file (stdout when omitted)")
    p.set_defaults(func=cmd_plotdata)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = _config(args)
        args.func(args, cfg)
    except CliError as e:
        print(f"vinseg {args.command}: {e}", file=sys.stderr)
        return e.code
    except ConfigError as e:
        print(f"vinseg {args.command}: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except vio.FormatError as e:
        print(f"vinseg {args.command}: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as e:
        print(f"vinseg {args.command}: {e.strerror or e}: {e.filename or ''}".rstrip(": "), file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
