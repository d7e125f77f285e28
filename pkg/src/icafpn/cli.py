"""Command-line entry point: synth, gradcheck, train, eval, ablate.

Exit codes: 0 success, 1 check or ablation failure, 2 missing input or bad configuration.
"""

from __future__ import annotations

import argparse
import csv
import io
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import gradsuite
from .autodiff import CheckpointError, ParamStore
from .config import ConfigError, RunConfig, parse_text, parse_variant, resolve
from .data import AnnotationError, Dataset, open_dataset, write_dataset
from .detector import Detector, TrainingDivergence
from .metrics import MetricReport, evaluate, load_predictions, write_predictions
from .neck import fusion_alphas
from .plotting import plot_ablation, plot_froc, plot_loss
from .train import predict_split, train

EXIT_OK, EXIT_FAIL, EXIT_MISSING = 0, 1, 2
TABLE_METRICS = ("AP", "AP50", "APS", "APM", "APL", "mFROC")


class MissingInput(FileNotFoundError):
    pass


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.echo())
    return out


def _dataset(cfg: RunConfig) -> Dataset:
    root = Path(cfg.data_dir)
    if not (root / "manifest.json").is_file():
        raise MissingInput(f"no dataset at {root} (run 'synth' first)")
    return open_dataset(root)


# ---- commands -------------------------------------------------------------------


def cmd_synth(cfg: RunConfig) -> int:
    _out_dir(cfg)
    ds = write_dataset(cfg.synth(), cfg.data_dir)
    hard = sum(r["hard"] for r in ds.manifest["images"])
    splits = {s: len(ds.ids(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(ds.ids())} images to {cfg.data_dir} (hard {hard}, splits {splits})")
    print(f"content_sha256 {ds.manifest['content_sha256']}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    cfg = replace(cfg, precision=64)
    out = _out_dir(cfg)
    names = list(cfg.gradcheck_blocks) or list(gradsuite.REGISTRY)
    unknown = [n for n in names if n not in gradsuite.REGISTRY]
    if unknown:
        raise ConfigError(f"unknown gradcheck blocks {unknown}; registered: {list(gradsuite.REGISTRY)}")
    print(f"grad_check float64 eps={gradsuite.EPS:g} threshold={gradsuite.THRESHOLD:g}")
    results = gradsuite.run_suite(names, seed=cfg.seed, log=print)
    (out / "gradcheck.txt").write_text("".join(gradsuite.format_result(r) + "\n" for r in results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED blocks: {', '.join(failed)}")
        return EXIT_FAIL
    print(f"all {len(results)} blocks passed")
    return EXIT_OK


def _train_run(cfg: RunConfig, log=print) -> ParamStore:
    ds = _dataset(cfg)
    out = _out_dir(cfg)
    result = train(ds, cfg.neck(), cfg.train(), out_dir=out, log=log)
    plot_loss(result.trace, out / "loss.png")
    return result.params


def cmd_train(cfg: RunConfig) -> int:
    try:
        params = _train_run(cfg)
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"parameters: total {params.count()} neck {params.count('neck.') + params.count('afw.') + params.count('fpn.')}")
    print(f"wrote {Path(cfg.out) / 'checkpoint.bin'} and {Path(cfg.out) / 'loss_trace.txt'}")
    return EXIT_OK


def _evaluate_run(cfg: RunConfig, ds: Dataset, params: ParamStore | None) -> MetricReport:
    out = _out_dir(cfg)
    ids = ds.ids(cfg.eval_split)
    gts = {i: ds.boxes(i) for i in ids}
    if params is None:
        path = Path(cfg.predictions)
        if not path.is_file():
            raise MissingInput(f"no predictions file at {path}")
        preds = load_predictions(path)
        alphas = {}
    else:
        params.frozen = True
        det = Detector(params, cfg.neck(), num_classes=ds.classes)
        preds = predict_split(det, ds, ids, score_thresh=cfg.score_thresh, iou_thresh=cfg.nms_iou)
        write_predictions(out / "predictions.txt", preds)
        alphas = {str(k): v for k, v in fusion_alphas(params).items()}
    report = evaluate(preds, gts, ids)
    report.fusion_alpha = alphas
    (out / "metrics.json").write_text(report.to_json())
    buf = io.StringIO()
    buf.write("fps_per_image,sensitivity\n")
    for fpi, sens in report.froc_curve:
        buf.write(f"{fpi!r},{sens!r}\n")
    (out / "froc_curve.csv").write_text(buf.getvalue())
    if report.froc_curve:
        fpi, sens = zip(*report.froc_curve)
        plot_froc({cfg.variant: (list(fpi), list(sens))}, out / "froc.png")
    return report


def _load_checkpoint(cfg: RunConfig) -> ParamStore:
    path = cfg.checkpoint_path()
    if not path.is_file():
        raise MissingInput(f"no checkpoint at {path}")
    return ParamStore.load(path)


def cmd_eval(cfg: RunConfig) -> int:
    ds = _dataset(cfg)
    params = None if cfg.predictions else _load_checkpoint(cfg)
    report = _evaluate_run(cfg, ds, params)
    print(_summary(report))
    print(f"wrote {Path(cfg.out) / 'metrics.json'} and {Path(cfg.out) / 'froc_curve.csv'}")
    return EXIT_OK


def _summary(r: MetricReport) -> str:
    def f(v):
        return "n/a" if v is None else f"{v:.4f}"

    sens = " ".join(f"S@{k}={f(v)}" for k, v in r.sensitivity.items())
    return f"AP={f(r.AP)} AP50={f(r.AP50)} AP75={f(r.AP75)} APS={f(r.APS)} APM={f(r.APM)} APL={f(r.APL)} {sens} mFROC={f(r.mFROC)}"


def _ablation_job(cfg: RunConfig) -> tuple[str, MetricReport | None]:
    """Train then evaluate one (variant, seed) run; failures are reported, not raised."""
    try:
        params = _train_run(cfg, log=None)
        report = _evaluate_run(cfg, _dataset(cfg), params)
        return "ok", report
    except (TrainingDivergence, ArithmeticError, ValueError) as exc:
        return f"failed: {type(exc).__name__}: {exc}", None


def median_or_none(values):
    vals = [v for v in values if v is not None]
    return statistics.median(vals) if len(vals) == len(values) and vals else None


def cmd_ablate(cfg: RunConfig) -> int:
    _dataset(cfg)
    out = _out_dir(cfg)
    jobs = [
        (name, seed, cfg.with_variant(name, seed, str(out / "runs" / f"{name}_s{seed}")))
        for name in cfg.ablate_variants
        for seed in cfg.ablate_seeds
    ]
    print(f"ablation: {len(cfg.ablate_variants)} variants x {len(cfg.ablate_seeds)} seeds = {len(jobs)} runs")
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            outcomes = list(pool.map(_ablation_job, [j[2] for j in jobs]))
    else:
        outcomes = []
        for name, seed, sub in jobs:
            outcomes.append(_ablation_job(sub))
            status, rep = outcomes[-1]
            print(f"  {name} seed {seed}: {status}" + (f" {_summary(rep)}" if rep else ""), flush=True)

    per_run = []
    for (name, seed, _), (status, rep) in zip(jobs, outcomes):
        per_run.append({"variant": name, "seed": seed, "status": status,
                        **{m: (getattr(rep, m) if rep else None) for m in TABLE_METRICS}})
    rows = []
    for name in cfg.ablate_variants:
        runs = [r for r in per_run if r["variant"] == name]
        ok = all(r["status"] == "ok" for r in runs)
        row = {"variant": name, "status": "ok" if ok else "failed", "seeds": len(runs)}
        row.update({m: (median_or_none([r[m] for r in runs]) if ok else None) for m in TABLE_METRICS})
        rows.append(row)

    _write_csv(out / "ablation_runs.csv", ["variant", "seed", "status", *TABLE_METRICS], per_run)
    _write_csv(out / "ablation.csv", ["variant", "status", "seeds", *TABLE_METRICS], rows)
    plot_ablation(rows, out / "ablation.png")
    print(_format_table(rows))
    failed = [r["variant"] for r in rows if r["status"] != "ok"]
    if failed:
        print(f"FAILED variants: {', '.join(failed)}")
        return EXIT_FAIL
    return EXIT_OK


def _cell(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _write_csv(path: Path, header: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(r[k]) for k in header])


def _format_table(rows: list[dict]) -> str:
    lines = [f"{'variant':<22s}" + "".join(f"{m:>9s}" for m in TABLE_METRICS)]
    for r in rows:
        lines.append(f"{r['variant']:<22s}" + "".join(f"{_cell(r[m]):>9.9s}" for m in TABLE_METRICS))
    return "\n".join(lines)


# ---- argument handling ------------------------------------------------------------

COMMANDS = {"synth": cmd_synth, "gradcheck": cmd_gradcheck, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icafpn", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--variant", help="neck variant, optionally suffixed with -no-c2")
    common.add_argument("--out", help="output directory")
    common.add_argument("--precision", type=int, choices=(32, 64))
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__doc__)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    text = {}
    if args.config is not None:
        if not args.config.is_file():
            raise MissingInput(f"no config file at {args.config}")
        text = parse_text(args.config.read_text(), str(args.config))
    for item in args.set:
        text.update(parse_text(item, "--set"))
    overrides = {"seed": args.seed, "out": args.out, "precision": args.precision}
    if args.variant is not None:
        overrides["variant"], overrides["use_c2"] = parse_variant(args.variant)
    return resolve(text, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except (MissingInput, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ConfigError, AnnotationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
