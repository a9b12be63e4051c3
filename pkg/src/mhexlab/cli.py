"""Command-line entry point: reproducible train / explain / evaluate /
analyze runs over the synthetic datasets.

Every command writes its resolved configuration next to its artifacts, and
reruns from that file are deterministic.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import analysis, metrics, saliency
from .datasets import gen_shapes, gen_tokens, localization_score
from .errors import MhexError
from .models import (ResNetConfig, TransformerConfig, build_resnet,
                     build_transformer, clone_model, load_checkpoint,
                     save_checkpoint, train)


def _resolve_out(args):
    out = os.environ.get("MHEX_OUT") or args.out
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_config(args, out_dir, name="config.txt"):
    skip = {"func", "config"}
    with open(out_dir / name, "w") as fh:
        for key, val in sorted(vars(args).items()):
            if key in skip:
                continue
            fh.write(f"{key}={val}\n")


def _load_config_defaults(parser, argv):
    """--config FILE preloads key=value pairs as argument defaults."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    path = argv[i + 1]
    overrides = {}
    with open(path) as fh:
        for line in fh:
            key, _, val = line.strip().partition("=")
            overrides[key.replace("-", "_")] = val
    rest = argv[:i] + argv[i + 2:]
    ns, _ = parser.parse_known_args(rest)
    explicit = {a[2:].replace("-", "_") for a in rest if a.startswith("--")}
    for key, val in overrides.items():
        if key in explicit:
            continue            # flags given on the command line win
        if hasattr(ns, key) and val != "None":
            cur = getattr(ns, key)
            if isinstance(cur, bool):
                val = val == "True"
            elif isinstance(cur, int):
                val = int(val)
            elif isinstance(cur, float):
                val = float(val)
            setattr(ns, key, val)
    return ns


def _make_dataset(args, n=None, seed=None):
    n = n if n is not None else args.n_samples
    seed = seed if seed is not None else args.seed
    if args.dataset == "shapes":
        return gen_shapes(n, seed=seed)
    return gen_tokens(n, seed=seed)


def _wf_config(args, n_class):
    return saliency.WeightFilterConfig(
        neg_mix=args.alpha,
        ss_threshold=args.ss,
        layer_decay=args.decay,
        token_layers=args.layers)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args):
    out = _resolve_out(args)
    dataset = _make_dataset(args)
    if args.dataset == "shapes":
        model = build_resnet(ResNetConfig(n_class=dataset.n_class), seed=args.seed)
        lr = args.lr if args.lr is not None else 3e-3
    else:
        model = build_transformer(
            TransformerConfig(vocab_size=dataset.vocab_size, n_class=dataset.n_class,
                              max_seq=dataset.max_seq), seed=args.seed)
        lr = args.lr if args.lr is not None else 2e-3
    log = train(model, dataset, mode=args.mode, epochs=args.epochs, lr=lr,
                seed=args.seed, batch_size=args.batch_size)
    save_checkpoint(model, out / "checkpoint.ckpt")
    with open(out / "trainlog.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "head_accuracies"])
        for e in log.entries:
            writer.writerow([e.epoch, f"{e.loss:.6g}",
                             " ".join(f"{a:.4f}" for a in e.head_accuracy)])
    _write_config(args, out)
    if log.entries:
        print(f"trained {args.epochs} epochs; final loss {log.entries[-1].loss:.4f}; "
              f"head accuracies {log.entries[-1].head_accuracy}")
    print(f"checkpoint: {out / 'checkpoint.ckpt'}")


def _sample_ids(args, dataset):
    if args.samples:
        ids = [int(s) for s in args.samples.split(",")]
        for i in ids:
            if not 0 <= i < len(dataset):
                raise MhexError(f"unknown sample id {i} (dataset has {len(dataset)})")
        return ids
    return list(range(min(8, len(dataset))))


def cmd_explain(args):
    out = _resolve_out(args)
    model = load_checkpoint(args.checkpoint)
    dataset = _make_dataset(args)
    ids = _sample_ids(args, dataset)
    wf = _wf_config(args, dataset.n_class)
    manifest = []

    def one(i):
        label = int(dataset.labels[i])
        rows = []
        if args.dataset == "shapes":
            image = dataset.images[i]
            smap = saliency.explain_image(model, image, label, wf)
            p = out / f"sample{i:04d}_mhex.pgm"
            saliency.render_heatmap(smap, p)
            rows.append((i, "mhex", p.name))
            p = out / f"sample{i:04d}_mhex_overlay.ppm"
            saliency.render_heatmap(smap, p, overlay=image)
            rows.append((i, "mhex_overlay", p.name))
            if args.grad_cam:
                gmap = saliency.gradcam_baseline(model, image, label)
                p = out / f"sample{i:04d}_gradcam.pgm"
                saliency.render_heatmap(gmap, p)
                rows.append((i, "gradcam", p.name))
        else:
            sal = saliency.explain_tokens(model, dataset.ids[i], label, wf)
            tokens = [f"tok{t}" for t in dataset.ids[i]]
            p = out / f"sample{i:04d}_tokens.csv"
            saliency.export_token_csv(tokens, sal, p)
            rows.append((i, "mhex_csv", p.name))
            p = out / f"sample{i:04d}_tokens.html"
            saliency.export_token_html(tokens, sal, p)
            rows.append((i, "mhex_html", p.name))
        return rows

    if args.workers > 1:
        with ThreadPoolExecutor(args.workers) as pool:
            for rows in pool.map(lambda i: one(i), ids):
                manifest.extend(rows)
    else:
        for i in ids:
            manifest.extend(one(i))
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "method", "artifact"])
        writer.writerows(manifest)
    _write_config(args, out)
    print(f"wrote {len(manifest)} artifacts to {out}")


def _truth_cam(dataset, i):
    return dataset.truth_masks[i].astype(np.float64)


def cmd_evaluate(args):
    out = _resolve_out(args)
    model = load_checkpoint(args.checkpoint)
    dataset = _make_dataset(args)
    n = min(args.n_samples, len(dataset))
    wf = _wf_config(args, dataset.n_class)

    if args.dataset == "tokens":
        records = []
        for i in range(n):
            label = int(dataset.labels[i])
            sal = saliency.explain_tokens(model, dataset.ids[i], label, wf)
            records.append(metrics.token_perturb_drop(
                model, dataset.ids[i], sal, label, top_frac=args.top_frac,
                mask_token=dataset.mask_id, pad_id=dataset.pad_id, sample_id=i))
        metrics.write_drop_csv(records, out / "token_drop.csv", method="mhex")
        _write_config(args, out)
        print(f"token mean drop: {np.mean([r.drop for r in records]):.4f}")
        return

    methods = {"mhex": None}
    if args.grad_cam:
        methods["gradcam"] = None
    if args.oracle_explainer:
        methods["oracle"] = None

    def records_for(method, worker_model):
        recs, loc = [], []
        for i in range(n):
            label = int(dataset.labels[i])
            image = dataset.images[i]
            if method == "mhex":
                smap = saliency.explain_image(worker_model, image, label, wf)
                cam = saliency.resize_map(smap.grid, image.shape[-2:])
            elif method == "gradcam":
                smap = saliency.gradcam_baseline(worker_model, image, label)
                cam = saliency.resize_map(smap.grid, image.shape[-2:])
            else:
                cam = _truth_cam(dataset, i)
            r = metrics.drop_record(worker_model, image, label, cam, sample_id=i)
            if args.force_area is not None:
                r.area = args.force_area
            recs.append(r)
            loc.append(localization_score(cam, dataset.truth_masks[i]))
        return recs, loc

    summary = []
    for method in methods:
        worker = clone_model(model) if args.workers > 1 else model
        recs, loc = records_for(method, worker)
        metrics.write_drop_csv(recs, out / f"drop_{method}.csv", method=method)
        curves_del, curves_ins = [], []
        for i in range(min(n, args.curve_samples)):
            label = int(dataset.labels[i])
            image = dataset.images[i]
            if method == "mhex":
                smap = saliency.explain_image(model, image, label, wf)
                cam = saliency.resize_map(smap.grid, image.shape[-2:])
            elif method == "gradcam":
                cam = saliency.resize_map(
                    saliency.gradcam_baseline(model, image, label).grid,
                    image.shape[-2:])
            else:
                cam = _truth_cam(dataset, i)
            curves_del.append(metrics.deletion_curve(model, image, cam, label,
                                                     steps=args.steps))
            curves_ins.append(metrics.insertion_curve(model, image, cam, label,
                                                      steps=args.steps))
        mean_del = metrics.Curve(curves_del[0].fractions,
                                 np.mean([c.confidences for c in curves_del], axis=0))
        mean_ins = metrics.Curve(curves_ins[0].fractions,
                                 np.mean([c.confidences for c in curves_ins], axis=0))
        metrics.write_curve_csv(mean_del, out / f"deletion_{method}.csv")
        metrics.write_curve_csv(mean_ins, out / f"insertion_{method}.csv")
        summary.append((method, metrics.avg_drop(recs), metrics.ead(recs),
                        metrics.auc(mean_del), metrics.auc(mean_ins),
                        float(np.mean(loc))))

    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "avg_drop", "ead", "deletion_auc",
                         "insertion_auc", "localization"])
        for row in summary:
            writer.writerow([row[0]] + [f"{v:.6g}" for v in row[1:]])
    _write_config(args, out)
    for row in summary:
        print(f"{row[0]}: avg_drop={row[1]:.4f} ead={row[2]:.4f} "
              f"del_auc={row[3]:.4f} ins_auc={row[4]:.4f} loc={row[5]:.4f}")


def cmd_analyze(args):
    out = _resolve_out(args)
    model = load_checkpoint(args.checkpoint)
    dataset = _make_dataset(args)
    n = min(args.n_samples, len(dataset))
    rows, records = analysis.correlation_triangle(model, dataset, n_samples=n)
    analysis.write_correlation_csv(rows, out / "correlation.csv")
    with open(out / "collab_records.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "site", "cosine", "p_orig", "sad_drop"])
        for r in records:
            writer.writerow([r.sample_id, r.site, f"{r.cosine:.6g}",
                             f"{r.p_orig:.6g}", f"{r.sad_drop:.6g}"])
    for i in range(min(n, args.block_samples)):
        label = int(dataset.labels[i])
        bq = analysis.blockwise_quality(model, dataset.images[i], label,
                                        grid=args.grid)
        saliency.render_heatmap(saliency.normalize_map(bq),
                                out / f"sample{i:04d}_blockwise.pgm")
    dh = analysis.relu_entropy_drop(args.entropy_n, seed=args.seed)
    with open(out / "entropy.txt", "w") as fh:
        fh.write(f"entropy_drop_estimate={dh:.6f}\n")
    _write_config(args, out)
    print(f"entropy drop estimate: {dh:.5f} (target 0.34657)")
    print(f"correlation report: {out / 'correlation.csv'}")


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(prog="mhex",
                                     description="explainability lab runner")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--dataset", choices=("shapes", "tokens"), default="shapes")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="mhex_out")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--n-samples", type=int, default=512)
        p.add_argument("--config", default=None,
                       help="key=value file of defaults (emitted by earlier runs)")

    def wf_flags(p):
        p.add_argument("--alpha", type=float, default=0.25)
        p.add_argument("--ss", type=float, default=None)
        p.add_argument("--decay", type=float, default=0.9)
        p.add_argument("--layers", type=int, default=3)

    p = sub.add_parser("train", help="train an instrumented host")
    common(p)
    p.add_argument("--mode", choices=("pretrain", "finetune"), default="finetune")
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=64)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("explain", help="emit saliency artifacts")
    common(p)
    wf_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", default=None, help="comma-separated sample ids")
    p.add_argument("--class-id", type=int, default=None)
    p.add_argument("--grad-cam", action="store_true")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("evaluate", help="saliency-quality metric tables")
    common(p)
    wf_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--top-frac", type=float, default=0.10)
    p.add_argument("--grad-cam", action="store_true")
    p.add_argument("--oracle-explainer", action="store_true")
    p.add_argument("--force-area", type=float, default=None,
                   help="test flag: override every record's area")
    p.add_argument("--curve-samples", type=int, default=16)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="collaboration and entropy analysis")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--grid", type=int, default=7)
    p.add_argument("--block-samples", type=int, default=4)
    p.add_argument("--entropy-n", type=int, default=1_000_000)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    if "--config" in argv:
        args = _load_config_defaults(parser, argv)
    else:
        args = parser.parse_args(argv)
    try:
        args.func(args)
    except (MhexError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
