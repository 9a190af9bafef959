"""Command-line entry point: ``mmfusion <command> ...``.

Errors print one machine-readable line ``error: code=<code> message=<text>``
on stderr, followed by a hint for humans, and exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from mmfusion import __version__
from mmfusion.checkpoint import load_checkpoint
from mmfusion.config import ABLATIONS, RunConfig, apply_env_overrides, load_config, preset, save_config
from mmfusion.dataio import load_dataset, save_dataset
from mmfusion.datapipe import make_folds
from mmfusion.errors import ContractError, FormatError, MMFusionError
from mmfusion.features import generate_synthetic_dataset
from mmfusion.gradcheck import run_suite
from mmfusion.postprocess import read_predictions, smooth, vote, write_predictions
from mmfusion.train import REPORT_SCHEMA, ablate, cross_validate, evaluate, train, write_json, write_run

HINTS = {
    "config": "check the config file or preset name",
    "contract": "check the inputs passed to the command",
    "format": "the file is truncated or not in the expected format",
    "numeric": "a computation produced NaN or Inf",
    "divergence": "training diverged; try a lower learning rate",
    "io": "check that the path exists and is readable",
}


def _config(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config, apply_env=False)
    else:
        cfg = preset(args.preset, getattr(args, "task", None) or "expr")
    changes = {}
    if getattr(args, "task", None):
        changes["task"] = args.task
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        changes["epochs"] = args.epochs
    if getattr(args, "workers", None) is not None:
        changes["workers"] = args.workers
    if changes:
        cfg = cfg.replace(**changes)
    return apply_env_overrides(cfg)


def _videos(args, cfg: RunConfig):
    path = getattr(args, "data", None) or cfg.data_path
    if path:
        return load_dataset(path, expected_dims=cfg.dims)
    return generate_synthetic_dataset(cfg.synthetic_spec())


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_config(args) -> int:
    cfg = _config(args)
    if args.out:
        save_config(cfg, args.out)
    else:
        sys.stdout.write(cfg.to_toml())
    return 0


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    changes = {
        "synthetic.class_count": args.classes,
        "synthetic.videos_per_class": args.videos_per_class,
        "synthetic.frames_per_video": args.frames,
        "synthetic.noise_std": args.noise,
    }
    changes = {k: v for k, v in changes.items() if v is not None}
    if changes:
        cfg = cfg.replace(**changes)
    videos = generate_synthetic_dataset(cfg.synthetic_spec())
    save_dataset(videos, args.out, dims=cfg.dims)
    if len(load_dataset(args.out, expected_dims=cfg.dims)) != len(videos):
        raise FormatError(f"{args.out}: read-back video count differs")
    print(f"wrote {len(videos)} videos to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    videos = _videos(args, cfg)
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.toml")
    cv = cross_validate(cfg, videos)
    write_run(cv, out)
    for k, f1 in enumerate(cv.fold_f1):
        print(f"fold {k}: macro_f1={f1:.4f}")
    print(f"pooled out-of-fold macro_f1={cv.pooled_f1:.4f} smoothed={cv.pooled_smoothed.average:.4f} ({cv.wall_time:.1f}s) -> {out}")
    return 0


def _predict(args, cfg, videos):
    return evaluate(load_checkpoint(args.checkpoint), videos, cfg)


def _metrics(result, cfg: RunConfig) -> dict:
    return {"schema_version": REPORT_SCHEMA, "config_digest": cfg.digest(), "task": cfg.task, **result.summary()}


def _write_checked(seqs, path) -> None:
    write_predictions(seqs, path)
    back = read_predictions(path)
    if [(s.video_id, len(s)) for s in back] != [(s.video_id, len(s)) for s in seqs]:
        raise FormatError(f"{path}: read-back predictions differ")


def cmd_eval(args) -> int:
    cfg = _config(args)
    videos = _videos(args, cfg)
    if args.videos:
        keep = set(args.videos.split(","))
        videos = [v for v in videos if v.video_id in keep]
    metrics = _metrics(_predict(args, cfg, videos), cfg)
    if args.out:
        write_json(metrics, args.out)
    _print_json(metrics)
    return 0


def cmd_predict(args) -> int:
    cfg = _config(args)
    videos = _videos(args, cfg)
    result = _predict(args, cfg, videos)
    _write_checked(result.smoothed if args.smooth else result.raw, args.out)
    if args.metrics:
        write_json(_metrics(result, cfg), args.metrics)
    print(f"wrote predictions for {len(videos)} videos to {args.out}")
    return 0


def cmd_smooth(args) -> int:
    cfg = _config(args)
    seqs = read_predictions(args.input)
    if not seqs:
        raise ContractError(f"{args.input} holds no predictions")
    policy = cfg.smoothing_policy(au=seqs[0].is_au)
    _write_checked([smooth(s, policy) for s in seqs], args.out)
    print(f"smoothed {len(seqs)} videos -> {args.out}")
    return 0


def cmd_vote(args) -> int:
    if len(args.inputs) < 2:
        raise ContractError("need >= 2 prediction files to vote")
    files = [{s.video_id: s for s in read_predictions(p)} for p in args.inputs]
    ids = list(files[0])
    for path, f in zip(args.inputs[1:], files[1:]):
        if set(f) != set(ids):
            raise ContractError(f"{path} covers different videos than {args.inputs[0]}")
    _write_checked([vote([f[v] for f in files]) for v in ids], args.out)
    print(f"voted {len(args.inputs)} files over {len(ids)} videos -> {args.out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    videos = _videos(args, cfg)
    train_ids, val_ids = make_folds(videos, cfg.folds, cfg.seed).split(0)
    conditions = args.condition or list(ABLATIONS)
    base = train(cfg, videos, train_ids, val_ids)
    rows = [ablate(cfg, c, videos, train_ids, val_ids, base_result=base) for c in conditions]
    for r in rows:
        print(f"{r['condition']}: base={r['base_macro_f1']:.4f} ablated={r['ablated_macro_f1']:.4f}")
    if args.out:
        write_json({"config_digest": cfg.digest(), "ablations": rows}, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    result = run_suite(seed=args.seed or 0, include_model=not args.ops_only)
    for name, err in result.errors.items():
        print(f"{name:20s} {err:.3e}")
    ok = result.passed(args.tol)
    print(f"max relative error {result.worst:.3e} ({'pass' if ok else 'FAIL'}, tol {args.tol:g}) in {result.seconds:.1f}s")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmfusion", description="Multimodal fusion models for AU and expression recognition.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--preset", default="ci", help="named configuration: full, ci or ablation (default ci)")
        p.add_argument("--task", choices=("au", "expr"))
        p.add_argument("--seed", type=int)
        if data:
            p.add_argument("--data", help="dataset file; synthetic data is generated when omitted")

    p = sub.add_parser("config", help="print or write the resolved configuration")
    common(p, data=False)
    p.add_argument("--out")
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(p, data=False)
    p.add_argument("--classes", type=int)
    p.add_argument("--videos-per-class", type=int)
    p.add_argument("--frames", type=int, help="frames per video")
    p.add_argument("--noise", type=float, help="noise standard deviation")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="k-fold training with per-fold checkpoints and a JSON report")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="macro F1 of a checkpoint, raw and smoothed")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--videos", help="comma-separated video ids to evaluate")
    p.add_argument("--out", help="write the metrics JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write per-frame predictions of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--smooth", action="store_true")
    p.add_argument("--metrics", help="also write the metrics JSON here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("smooth", help="smooth a prediction file")
    common(p, data=False)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_smooth)

    p = sub.add_parser("vote", help="per-frame majority vote over prediction files")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_vote)

    p = sub.add_parser("ablate", help="train the base model and ablated variants on one split")
    common(p)
    p.add_argument("--condition", action="append", choices=ABLATIONS)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--ops-only", action="store_true")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except MMFusionError as exc:
        code = exc.code
        msg = str(exc)
    except OSError as exc:
        code, msg = "io", str(exc)
    print(f"error: code={code} message={json.dumps(msg)}", file=sys.stderr)
    print(f"mmfusion {args.command}: {msg} ({HINTS.get(code, 'see --help')})", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
