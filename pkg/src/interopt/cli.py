"""``interopt`` command line: synth, train, cv, explain, optimize, report.

Exit codes: 0 success (per-well soft failures included), 1 runtime or data
error, 2 usage error. Every command writes its outputs through a temp file
and rename, then a ``run_manifest.json`` describing the run.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import (
    Dataset,
    SyntheticGroundTruth,
    default_schema,
    default_truth,
    generate_synthetic,
    load_csv,
    load_schema,
    random_truth,
    save_schema,
    write_csv,
)
from .emulator import TrainConfig, load_model, loo_cv, r_squared, save_model, train
from .errors import ExactModeCapError, InterOptError
from .optimizer import InterOptConfig, optimize_campaign, run_ablation
from .report import (
    campaign_to_dict,
    curves_svg,
    distribution_rows,
    dump_json,
    histogram_svg,
    importance_svg,
    load_campaign_json,
    write_ablation_csv,
    write_distribution_csv,
    write_summary_csv,
    write_text,
)
from .shapley import EXACT_CAP, explain, global_shapley, global_summary, make_background, write_attributions_csv

log = logging.getLogger("interopt")


class UsageError(Exception):
    """Bad arguments detected after parsing; exit code 2."""


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Collects outputs of one command and writes them atomically."""

    def __init__(self, command: str, out_dir, args):
        self.command = command
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.args = args
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.config: dict = {}
        self.seeds: dict = {}
        self.start = time.perf_counter()

    def add_input(self, path):
        if path is not None:
            self.inputs[str(path)] = sha256_file(path)

    def emit(self, name: str, writer) -> Path:
        """Call ``writer(tmp_path)`` then move the file into place as ``name``."""
        dest = self.out / name
        fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=self.out)
        os.close(fd)
        try:
            writer(tmp)
            os.replace(tmp, dest)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
        self.outputs[name] = sha256_file(dest)
        return dest

    def finish(self):
        manifest = {
            "command": self.command,
            "version": __version__,
            "argv": self.args.argv,
            "config": self.config,
            "seeds": self.seeds,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "duration_s": round(time.perf_counter() - self.start, 3),
        }
        self.emit("run_manifest.json", lambda p: dump_json(manifest, p))


def _read_config(args) -> dict:
    if args.config is None:
        return {}
    d = json.loads(Path(args.config).read_text(encoding="utf-8"))
    if not isinstance(d, dict):
        raise UsageError(f"{args.config}: config must be a JSON object")
    return d


def _section(cfg: dict, key: str) -> dict:
    """Either a nested ``{key: {...}}`` section or the flat config itself."""
    if isinstance(cfg.get(key), dict):
        return dict(cfg[key])
    return {k: v for k, v in cfg.items() if not isinstance(v, dict)}


def _schema(args, run: Run):
    if getattr(args, "schema", None):
        run.add_input(args.schema)
        return load_schema(args.schema)
    return default_schema()


def _load_data(path, schema, run: Run, require_target=True) -> Dataset:
    run.add_input(path)
    return load_csv(path, schema, require_target=require_target)


def _train_config(args) -> TrainConfig:
    d = _section(_read_config(args), "train")
    if args.seed is not None:
        d["seed"] = args.seed
    return TrainConfig.from_dict(d)


def _interopt_config(args) -> InterOptConfig:
    d = _section(_read_config(args), "interopt")
    if args.seed is not None:
        d["seed"] = args.seed
    if getattr(args, "ensemble", None) is not None:
        d["n_ensemble"] = args.ensemble
    return InterOptConfig.from_dict(d)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args, run: Run):
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    schema = _schema(args, run)
    seed = 0 if args.seed is None else args.seed
    if args.truth:
        run.add_input(args.truth)
        truth = SyntheticGroundTruth.from_dict(json.loads(Path(args.truth).read_text(encoding="utf-8")))
    elif args.schema:
        truth = random_truth(schema, seed=seed)
    else:
        truth = default_truth(seed=seed)
    if args.noise:
        sd = float(np.std(generate_synthetic(max(args.count, 2), schema, truth.with_(noise_std=0.0)).y))
        truth = truth.with_(noise_std=args.noise * sd)
    truth = truth.with_(seed=seed)
    data = generate_synthetic(args.count, schema, truth)
    run.seeds = {"seed": seed}
    run.config = {"count": args.count, "noise": args.noise}
    run.emit("data.csv", lambda p: write_csv(data, p))
    run.emit("truth.json", lambda p: dump_json(truth.to_dict(), p))
    run.emit("schema.json", lambda p: save_schema(schema, p))
    _say(args, f"wrote {args.count} records to {run.out / 'data.csv'}")


def cmd_train(args, run: Run):
    schema = _schema(args, run)
    cfg = _train_config(args)
    data = _load_data(args.data, schema, run)
    model = train(data, cfg)
    fit = r_squared(model.predict(data.X), data.y)
    run.config, run.seeds = cfg.to_dict(), {"seed": cfg.seed}
    run.emit("model.json", lambda p: save_model(model, p))
    run.emit("fit_report.json", lambda p: dump_json(
        {"n_records": len(data), "fit_r2": fit, "final_loss": model.loss_history[-1]}, p))
    _say(args, f"fit R2 = {fit:.6f}")


def cmd_cv(args, run: Run):
    schema = _schema(args, run)
    cfg = _train_config(args)
    data = _load_data(args.data, schema, run)
    res = loo_cv(data, cfg, n_jobs=args.jobs)
    run.config, run.seeds = cfg.to_dict(), {"seed": cfg.seed}

    def write_preds(p):
        with open(p, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "observed", "cv_predicted", "fit_predicted"])
            for row in zip(res.ids, res.observed, res.cv_predicted, res.fit_predicted):
                w.writerow([row[0], *map(lambda v: repr(float(v)), row[1:])])

    run.emit("cv_predictions.csv", write_preds)
    run.emit("cv_report.json", lambda p: dump_json({"n_records": len(data), "cv_r2": res.cv_r2,
                                                    "fit_r2": res.fit_r2}, p))
    _say(args, f"CV R2 = {res.cv_r2:.6f}  fit R2 = {res.fit_r2:.6f}")


def _model_and_data(args, run: Run, require_target=False):
    run.add_input(args.model)
    model = load_model(args.model)
    if model.schema is None:
        raise InterOptError(f"{args.model}: artifact carries no schema")
    data = _load_data(args.data, model.schema, run, require_target=require_target)
    return model, data


def cmd_explain(args, run: Run):
    model, data = _model_and_data(args, run)
    n = model.input_width
    if args.sampled is None and n > EXACT_CAP:
        raise ExactModeCapError(n, EXACT_CAP)
    if args.sampled is not None and args.sampled < 1:
        raise UsageError("--sampled needs N >= 1")
    seed = 0 if args.seed is None else args.seed
    Z = model.norm.normalize_x(data.X)
    bg = make_background(Z, args.background, seed)
    names = model.schema.input_names
    attrs = [explain(model, bg, Z[i], n_permutations=args.sampled, seed=seed, record_id=rid, feature_names=names)
             for i, rid in enumerate(data.ids)]
    gi = global_shapley(attrs)
    mode = "exact" if args.sampled is None else f"sampled:{args.sampled}"
    run.config = {"mode": mode, "background": args.background}
    run.seeds = {"seed": seed}
    run.emit("attributions.csv", lambda p: write_attributions_csv(attrs, names, p))
    summary = global_summary(gi, names, mode=mode, units="normalized target")
    run.emit("global_importance.json", lambda p: dump_json(summary, p))
    if not args.no_svg:
        order = gi.ranking()
        run.emit("importance.svg", lambda p: write_text(
            importance_svg([names[k] for k in order], [gi.values[k] for k in order]), p))
    _say(args, "importance: " + ", ".join(f"{e['feature']}={e['mean_abs_shap']:.4g}"
                                            for e in summary["importance"]))


def cmd_optimize(args, run: Run):
    model, data = _model_and_data(args, run)
    cfg = _interopt_config(args)
    if args.well is not None:
        try:
            data = data.subset([data.index_of(args.well)])
        except KeyError:
            raise UsageError(f"unknown well id {args.well!r}") from None
    run.config, run.seeds = cfg.to_dict(), {"seed": cfg.seed}
    names = model.schema.input_names
    if args.ablation:
        rows, reports = run_ablation(model, data, cfg)
        run.emit("ablation.csv", lambda p: write_ablation_csv(rows, p))
        rep = reports[0]
    else:
        rep = optimize_campaign(model, data, cfg)
    d = campaign_to_dict(rep, names)
    run.emit("campaign.json", lambda p: dump_json(d, p))
    run.emit("campaign_summary.csv", lambda p: write_summary_csv(d, p))
    run.emit("distribution.csv", lambda p: write_distribution_csv(d, p))
    c = d["summary"]["outcomes"]
    _say(args, f"{len(rep.wells)} wells, mean reduction {100 * rep.mean_reduction:.3f}%, "
               f"not converged {c['not_converged']}, no improvement {c['no_improvement']}")


def cmd_report(args, run: Run):
    run.add_input(args.campaign)
    try:
        d = load_campaign_json(args.campaign)
    except (ValueError, OSError) as exc:
        raise InterOptError(str(exc)) from exc
    if not d["wells"]:
        raise UsageError("campaign report has no wells")
    run.emit("distribution.csv", lambda p: write_distribution_csv(d, p))
    run.emit("histogram.svg", lambda p: write_text(histogram_svg(d), p))
    run.emit("curves.svg", lambda p: write_text(curves_svg(d), p))
    _say(args, "  ".join(f"{label}: {count}" for label, count, _ in distribution_rows(d)))


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _say(args, msg):
    if not args.quiet:
        print(msg)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", type=Path, default=None, help="JSON config; flags win over it")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="interopt", description="Emulator, Shapley and EnRML well optimization")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--schema", type=Path)
    s.add_argument("--truth", type=Path, help="ground-truth JSON to sample from")
    s.add_argument("--noise", type=float, default=0.0, help="noise as a fraction of the target std")

    for name in ("train", "cv"):
        t = sub.add_parser(name, parents=[common], help="train the emulator" if name == "train"
                           else "leave-one-out cross-validation")
        t.add_argument("--data", type=Path, required=True)
        t.add_argument("--schema", type=Path)
        if name == "cv":
            t.add_argument("--jobs", type=int, default=1)

    e = sub.add_parser("explain", parents=[common], help="Shapley attributions")
    e.add_argument("--model", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    mode = e.add_mutually_exclusive_group()
    mode.add_argument("--exact", action="store_true", help="exact enumeration (default)")
    mode.add_argument("--sampled", type=int, metavar="N", help="permutation sampling with N permutations")
    e.add_argument("--background", type=int, default=128, metavar="K")
    e.add_argument("--no-svg", action="store_true")

    o = sub.add_parser("optimize", parents=[common], help="optimize adjustable features")
    o.add_argument("--model", type=Path, required=True)
    o.add_argument("--data", type=Path, required=True)
    which = o.add_mutually_exclusive_group()
    which.add_argument("--well", metavar="ID")
    which.add_argument("--all", action="store_true", help="every well (default)")
    o.add_argument("--ablation", action="store_true", help="run the block x adaptive-step grid")
    o.add_argument("--ensemble", type=int, metavar="N_E")

    r = sub.add_parser("report", parents=[common], help="figures from a campaign report")
    r.add_argument("--campaign", type=Path, required=True)
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "cv": cmd_cv, "explain": cmd_explain,
            "optimize": cmd_optimize, "report": cmd_report}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        run = Run(args.command, args.out, args)
        COMMANDS[args.command](args, run)
        run.finish()
    except (UsageError, ExactModeCapError) as exc:
        print(f"interopt {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (InterOptError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"interopt {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
