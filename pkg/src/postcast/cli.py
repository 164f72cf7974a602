"""Headless driver: optimize, apply, evaluate, serve.

Machine-readable output is always JSON (reports on stdout, artifacts on
disk); human diagnostics go to stderr. Exit codes: 0 success, 2 for input
or configuration problems, 1 for internal failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .actions import CorrectionPlan, apply_plan
from .batch import ChannelReport, EvalReport, SplitSpec, mse
from .data import (
    BASELINE_NAMES,
    WindowSpec,
    baseline_predictions,
    channel_stats,
    chronological_split,
    load_predictions,
    make_windows,
    normalize_series,
    parse_csv,
    read_prediction_file,
    write_prediction_file,
)
from .errors import ValidationError
from .search import Objective, OptimizerConfig, run

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INVALID = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="postcast",
        description="Post-training correction of time series forecasts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_opt = sub.add_parser("optimize", help="search for the best correction plan")
    p_opt.add_argument("--data", required=True, help="time series CSV")
    source = p_opt.add_mutually_exclusive_group(required=True)
    source.add_argument("--predictions", help="prediction file from an external model")
    source.add_argument("--baseline", choices=BASELINE_NAMES, help="built-in forecaster")
    p_opt.add_argument("--window", "--window_size", dest="window", type=int, required=True)
    p_opt.add_argument(
        "--horizon", "--prediction_horizon", dest="horizon", type=int, required=True
    )
    p_opt.add_argument("--stride", type=int, default=1)
    p_opt.add_argument(
        "--strategy", choices=("random", "sh-hpo", "ppo", "ga"), default="random"
    )
    p_opt.add_argument("--budget", type=int, default=200)
    p_opt.add_argument("--episodes", type=int, default=None)
    p_opt.add_argument("--seed", type=int, default=0)
    p_opt.add_argument("--affine-tail", action="store_true")
    p_opt.add_argument(
        "--affine-scope", choices=("global", "per_channel", "per_horizon"),
        default="per_channel",
    )
    p_opt.add_argument(
        "--splits", default="0.6,0.2,0.2", help="train,val,test fractions"
    )
    p_opt.add_argument("--normalize", action="store_true", help="per-channel z-score")
    p_opt.add_argument("--ridge-lambda", type=float, default=1e-2)
    p_opt.add_argument("--jobs", "--n-jobs", dest="jobs", type=int, default=1)
    p_opt.add_argument("--out", required=True, help="artifact directory")

    p_apply = sub.add_parser("apply", help="apply a stored plan to predictions")
    p_apply.add_argument("--plan", required=True)
    p_apply.add_argument("--predictions", required=True)
    p_apply.add_argument("--seed", type=int, default=0)
    p_apply.add_argument("--out", required=True)

    p_eval = sub.add_parser("evaluate", help="score predictions against truth")
    p_eval.add_argument("--predictions", required=True)
    p_eval.add_argument(
        "--truth-data", required=True, help="truth in prediction-file format"
    )
    p_eval.add_argument(
        "--baseline-predictions",
        help="uncorrected predictions; enables the improvement metric",
    )

    p_serve = sub.add_parser("serve", help="run the correction service")
    p_serve.add_argument("--config", default=None, help="service config JSON")

    return parser


def _parse_splits(text: str) -> SplitSpec:
    parts = text.split(",")
    if len(parts) != 3:
        raise ValidationError(f"--splits expects three fractions, got {text!r}")
    try:
        a, b, c = (float(p) for p in parts)
    except ValueError:
        raise ValidationError(f"--splits expects numbers, got {text!r}") from None
    return SplitSpec(a, b, c)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def cmd_optimize(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    series = parse_csv(Path(args.data).read_bytes())
    wspec = WindowSpec(args.window, args.horizon, args.stride)
    split = _parse_splits(args.splits)
    train_series, val_series, test_series = chronological_split(series, split, wspec)
    if args.normalize:
        mean, std = channel_stats(train_series)
        train_series = normalize_series(train_series, mean, std)
        val_series = normalize_series(val_series, mean, std)
        test_series = normalize_series(test_series, mean, std)

    train_w = make_windows(train_series, wspec)
    val_w = make_windows(val_series, wspec)
    test_w = make_windows(test_series, wspec)

    if args.baseline:
        model = baseline_predictions(args.baseline, train_w, wspec, lam=args.ridge_lambda)
        train_batch = model.batch(train_w)
        val_batch = model.batch(val_w)
        test_batch = model.batch(test_w)
        model_label = args.baseline
    else:
        pred_file = read_prediction_file(args.predictions)
        train_batch = load_predictions(pred_file, train_w)
        val_batch = load_predictions(pred_file, val_w)
        test_batch = load_predictions(pred_file, test_w)
        model_label = pred_file.model

    cfg = OptimizerConfig(
        strategy=args.strategy,
        budget=args.budget,
        episodes=args.episodes,
        seed=args.seed,
        affine_tail=args.affine_tail,
        affine_scope=args.affine_scope,
        jobs=args.jobs,
    )
    obj = Objective(val=val_batch, train=train_batch, rng_seed=args.seed)
    trace, report = run(obj, cfg, test=test_batch)

    _write_json(out_dir / "plan.json", trace.best_plan.to_dict())
    (out_dir / "trace.jsonl").write_text(trace.to_jsonl())
    _write_json(out_dir / "report.json", report.to_dict())
    write_prediction_file(
        out_dir / "predictions_test.csv",
        test_batch.predictions,
        test_batch.sample_ids,
        window=args.window,
        model=model_label,
    )
    write_prediction_file(
        out_dir / "truth_test.csv",
        test_batch.truth,
        test_batch.sample_ids,
        window=args.window,
        model="truth",
    )
    print(
        f"best plan: {trace.best_plan.describe()} | "
        f"val mse {trace.baseline_val_mse:.6g} -> {trace.best_val_mse:.6g} | "
        f"test improvement "
        f"{'n/a' if report.improvement is None else f'{report.improvement:.4f}'}",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_apply(args) -> int:
    plan = CorrectionPlan.from_dict(json.loads(Path(args.plan).read_text()))
    pred_file = read_prediction_file(args.predictions)
    ids = pred_file.sample_ids()
    h, d = pred_file.horizon, pred_file.channels
    preds = np.empty((len(ids), h, d))
    for i, sid in enumerate(ids):
        for ch in range(d):
            key = (sid, ch)
            if key not in pred_file.values:
                raise ValidationError(f"prediction file missing record {key}")
            preds[i, :, ch] = pred_file.values[key]
    corrected = apply_plan(plan, preds, rng_seed=args.seed)
    write_prediction_file(
        args.out, corrected, ids, window=pred_file.window, model=pred_file.model
    )
    return EXIT_OK


def _aligned_array(pred_file, ids, h, d, label) -> np.ndarray:
    out = np.empty((len(ids), h, d))
    for i, sid in enumerate(ids):
        for ch in range(d):
            key = (sid, ch)
            if key not in pred_file.values:
                raise ValidationError(f"{label} file missing record {key}")
            out[i, :, ch] = pred_file.values[key]
    return out


def cmd_evaluate(args) -> int:
    pred_file = read_prediction_file(args.predictions)
    truth_file = read_prediction_file(args.truth_data)
    if pred_file.horizon != truth_file.horizon or pred_file.channels != truth_file.channels:
        raise ValidationError("prediction and truth files disagree on (H, d)")
    ids = truth_file.sample_ids()
    h, d = truth_file.horizon, truth_file.channels
    truth = _aligned_array(truth_file, ids, h, d, "truth")
    after = _aligned_array(pred_file, ids, h, d, "predictions")
    if args.baseline_predictions:
        base_file = read_prediction_file(args.baseline_predictions)
        before = _aligned_array(base_file, ids, h, d, "baseline predictions")
    else:
        before = after

    rows = []
    for ch in range(d):
        b = mse(before[:, :, ch], truth[:, :, ch])
        a = mse(after[:, :, ch], truth[:, :, ch])
        imp = (b - a) / b if (b > 0 and args.baseline_predictions) else None
        rows.append(ChannelReport(ch, b, a, imp))
    gb, ga = mse(before, truth), mse(after, truth)
    report = EvalReport(
        mse_before=gb,
        mse_after=ga,
        improvement=(gb - ga) / gb if (gb > 0 and args.baseline_predictions) else None,
        per_channel=tuple(rows),
    )
    print(json.dumps(report.to_dict(), sort_keys=True, indent=2))
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service import ServiceConfig, create_app

    cfg = ServiceConfig.load(args.config)
    app = create_app(cfg)
    try:
        uvicorn.run(app, host=cfg.host, port=cfg.port, log_level="warning")
    except SystemExit as e:  # uvicorn signals port conflicts this way
        return int(e.code or EXIT_INTERNAL)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "optimize": cmd_optimize,
        "apply": cmd_apply,
        "evaluate": cmd_evaluate,
        "serve": cmd_serve,
    }
    try:
        return handlers[args.command](args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as e:
        print(f"error: missing file {e.filename}", file=sys.stderr)
        return EXIT_INVALID
    except KeyboardInterrupt:
        return EXIT_OK
    except Exception as e:  # noqa: BLE001 -- CLI boundary
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
