"""Command line entry point: generate-data, train, eval, infer, ablate, plot."""
import argparse
import datetime
import json
import logging
import os
import sys

import yaml

from . import __version__
from .config import ConfigError, apply_overrides, load_config, profile, save_config

log = logging.getLogger("avloc")


def _run_dir(path, command):
    if not path:
        stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
        path = os.path.join("runs", f"{command}-{stamp}")
    os.makedirs(path, exist_ok=True)
    return path


def write_manifest(run_dir, command, args, outputs, extra=None):
    manifest = {
        "command": command,
        "version": __version__,
        "created": datetime.datetime.now().isoformat(timespec="seconds"),
        "args": {k: v for k, v in vars(args).items() if k != "func"},
        "outputs": sorted(os.path.relpath(p, run_dir) for p in outputs),
    }
    if extra:
        manifest.update(extra)
    with open(os.path.join(run_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, default=str)


def _config(args):
    cfg = load_config(args.config) if args.config else profile(args.profile)
    return apply_overrides(cfg, args.set)


def _splits(path):
    """``path`` holding ``train/`` and ``test/`` subsets, or a single dataset dir."""
    from .datagen import load_dataset
    if os.path.exists(os.path.join(path, "meta.json")):
        return load_dataset(path)[0], None
    train = load_dataset(os.path.join(path, "train"))[0]
    test_dir = os.path.join(path, "test")
    test = load_dataset(test_dir)[0] if os.path.isdir(test_dir) else None
    return train, test


def _eval_split(path):
    from .datagen import load_dataset
    if os.path.exists(os.path.join(path, "meta.json")):
        return load_dataset(path)[0]
    return load_dataset(os.path.join(path, "test"))[0]


def cmd_generate_data(args):
    from .datagen import SynthConfig, generate_dataset, save_dataset
    sc = SynthConfig(num_classes=args.num_classes, T=args.T, D_in=args.d_in,
                     events_per_video=args.events_per_video,
                     duration_range=(args.min_duration, args.max_duration),
                     noise_std=args.noise_std, distractor_rate=args.distractor_rate,
                     seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    save_dataset(os.path.join(args.out, "train"), generate_dataset(sc, args.n_train), sc)
    save_dataset(os.path.join(args.out, "test"),
                 generate_dataset(sc, args.n_test, offset=args.n_train), sc)
    write_manifest(args.out, "generate-data", args,
                   [os.path.join(args.out, "train", "meta.json"),
                    os.path.join(args.out, "test", "meta.json")])
    print(f"wrote {args.n_train} train / {args.n_test} test videos to {args.out}")


def cmd_train(args):
    from .evaluation import write_report
    from .train import Trainer
    cfg = _config(args)
    train, test = _splits(args.data)
    run_dir = _run_dir(args.run_dir, "train")
    save_config(os.path.join(run_dir, "config.json"), cfg)
    trainer = Trainer(cfg, train, test, run_dir)
    if args.resume:
        trainer.load(args.resume)
    log_path = os.path.join(run_dir, "log.jsonl")
    with open(log_path, "a") as f:
        def log_fn(line):
            print(line, flush=True)
            f.write(json.dumps(trainer.state.history[-1]) + "\n")
            f.flush()
        trainer.fit(log_fn)
    outputs = [os.path.join(run_dir, n) for n in ("config.json", "log.jsonl", "last.pt")]
    if test:
        report = trainer.evaluate(test)
        write_report(os.path.join(run_dir, "report"), report, "final")
        print(report.table("final"))
        outputs += [os.path.join(run_dir, "report.json"), os.path.join(run_dir, "report.txt")]
        if os.path.exists(os.path.join(run_dir, "best.pt")):
            outputs.append(os.path.join(run_dir, "best.pt"))
    write_manifest(run_dir, "train", args, outputs,
                   {"best_avg_map": trainer.state.best_avg_map})


def cmd_eval(args):
    from .evaluation import evaluate, write_report
    from .postprocess import read_detections
    from .train import evaluate_model, load_model
    samples = _eval_split(args.data)
    run_dir = _run_dir(args.run_dir, "eval")
    if args.detections:
        report = evaluate(read_detections(args.detections),
                          {s.id: s.annotations for s in samples}, args.num_classes)
    else:
        model, cfg = load_model(args.checkpoint)
        report = evaluate_model(model, samples, cfg)
    write_report(os.path.join(run_dir, "report"), report, args.label)
    print(report.table(args.label))
    write_manifest(run_dir, "eval", args, [os.path.join(run_dir, "report.json"),
                                           os.path.join(run_dir, "report.txt")])


def cmd_infer(args):
    from .train import infer, load_model
    model, cfg = load_model(args.checkpoint)
    samples = _eval_split(args.data)
    run_dir = _run_dir(args.run_dir, "infer")
    out = os.path.join(run_dir, "detections.json")
    infer(model, samples, out, cfg)
    write_manifest(run_dir, "infer", args, [out])
    print(f"wrote detections for {len(samples)} videos to {out}")


def _parse_axes(items):
    axes = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"axis must look like name=v1,v2,..., got {item!r}")
        name, raw = item.split("=", 1)
        axes[name.strip()] = [yaml.safe_load(v) for v in raw.split(",") if v != ""]
    return axes


def cmd_ablate(args):
    from .ablate import ablate, format_table
    cfg = _config(args)
    axes = _parse_axes(args.axis)
    for name in axes:
        if not hasattr(cfg, name):
            raise ConfigError(f"unknown ablation axis {name!r}")
    train, test = _splits(args.data)
    if test is None:
        raise ValueError("ablation needs a test split")
    run_dir = _run_dir(args.run_dir, "ablate")
    rows = ablate(cfg, train, test, axes, run_dir)
    print(format_table(rows, axes))
    write_manifest(run_dir, "ablate", args, [os.path.join(run_dir, "ablation.txt"),
                                             os.path.join(run_dir, "ablation.json")])


def cmd_plot(args):
    from .plots import csm_std_summary, plot_csm, plot_timeline
    from .evaluation import cross_similarity_matrix
    from .train import load_model, predict, unimodal_features
    samples = _eval_split(args.data)
    by_id = {s.id: s for s in samples}
    run_dir = _run_dir(args.run_dir, "plot")
    models = []
    for spec in args.model:
        name, path = spec.split("=", 1) if "=" in spec else (os.path.basename(spec), spec)
        models.append((name, path))
    ids = args.videos or [s.id for s in samples[:args.num_videos]]
    for vid in ids:
        if vid not in by_id:
            raise ValueError(f"unknown video id {vid!r}")
    outputs, stds = [], {}
    for name, path in models:
        model, cfg = load_model(path)
        stds[name] = [cross_similarity_matrix(*unimodal_features(model, s))[1] for s in samples]
        dets = predict(model, [by_id[v] for v in ids], cfg)
        for vid in ids:
            s = by_id[vid]
            stem = os.path.join(run_dir, f"{name}_{vid}")
            F_v, F_a = unimodal_features(model, s)
            plot_csm(F_v, F_a, stem + "_csm.png", stem + "_csm.csv", f"{name} {vid}")
            plot_timeline(s.annotations, dets[vid], s.duration, stem + "_timeline.png",
                          stem + "_gt.csv", stem + "_pred.csv", args.score_thresh)
            outputs += [stem + suffix for suffix in ("_csm.png", "_csm.csv", "_timeline.png",
                                                      "_gt.csv", "_pred.csv")]
    summary = csm_std_summary(stds, os.path.join(run_dir, "csm_std.png"),
                              os.path.join(run_dir, "csm_std.csv"))
    outputs += [os.path.join(run_dir, "csm_std.png"), os.path.join(run_dir, "csm_std.csv")]
    for name, m in summary.items():
        print(f"{name}: mean of CSM std = {m:.4f}")
    write_manifest(run_dir, "plot", args, outputs)


def _add_config_args(p):
    p.add_argument("--config", help="YAML/JSON config file")
    p.add_argument("--profile", default="desk", help="base profile when no file is given")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field (repeatable)")


def build_parser():
    parser = argparse.ArgumentParser(prog="avloc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic train/test dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=200)
    p.add_argument("--n-test", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-classes", type=int, default=5)
    p.add_argument("--T", type=int, default=64)
    p.add_argument("--d-in", type=int, default=64)
    p.add_argument("--events-per-video", type=int, default=3)
    p.add_argument("--min-duration", type=int, default=2)
    p.add_argument("--max-duration", type=int, default=32)
    p.add_argument("--noise-std", type=float, default=0.5)
    p.add_argument("--distractor-rate", type=float, default=0.0)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--data", required=True)
    p.add_argument("--run-dir")
    p.add_argument("--resume", help="checkpoint to resume from")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint or a detections file")
    p.add_argument("--data", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--detections")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--label", default="model")
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="write detections JSON for a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ablate", help="train one model per axis combination")
    p.add_argument("--data", required=True)
    p.add_argument("--axis", action="append", default=[], metavar="NAME=V1,V2",
                   help="config field and values to sweep (repeatable)")
    p.add_argument("--run-dir")
    _add_config_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="CSM heatmaps, timelines and CSM-std summary")
    p.add_argument("--data", required=True)
    p.add_argument("--model", action="append", required=True, metavar="NAME=CHECKPOINT")
    p.add_argument("--videos", nargs="*")
    p.add_argument("--num-videos", type=int, default=3)
    p.add_argument("--score-thresh", type=float, default=0.3)
    p.add_argument("--run-dir")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
