"""Command line interface, one subcommand per stage.

Every stage reads the same optional run config (JSON with ``cohort`` and
``pipeline`` sections) and recomputes the subject-level split from the cohort
file and the seed, so stages can run in separate processes. Exit status is 0
on success and 2 when an input fails validation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import engine, harness, pipeline, strategy, synthcohort
from .domain import read_cohort, validate_visit, write_cohort
from .model import OpenClinicalModel
from .pipeline import PipelineConfig
from .synthcohort import CohortSpec

log = logging.getLogger("openclinical")

EXAMINATION_FILE = "examination.jsonl"
TRACES_FILE = "traces.jsonl"
REPORT_FILE = "report.json"


class ValidationError(Exception):
    pass


def load_config(path, seed) -> tuple[CohortSpec, PipelineConfig]:
    d = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        if not isinstance(d, dict) or set(d) - {"cohort", "pipeline"}:
            raise ValidationError("config must be an object with optional 'cohort' and 'pipeline' sections")
    spec = CohortSpec.from_dict(d.get("cohort", {}))
    pdict = dict(d.get("pipeline", {}))
    pdict.setdefault("seed", spec.seed)
    cfg = PipelineConfig.from_dict(pdict)
    if seed is not None:
        spec.seed = cfg.seed = seed
    problems = spec.validate()
    if problems:
        raise ValidationError("; ".join(problems))
    return spec, cfg


def write_json(path, obj) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_splits(path, cfg: PipelineConfig):
    visits = read_cohort(path)
    if not visits:
        raise ValidationError(f"{path}: empty cohort")
    width = next(iter(visits[0].rows.values())).values.shape[0]
    for v in visits:
        problems = validate_visit(v, width)
        if problems:
            raise ValidationError(f"{v.subject_id}/{v.visit_index}: " + "; ".join(problems))
    train, val, test = synthcohort.split(visits, cfg.split_fractions, cfg.seed)
    return width, train, val, test


def need(args, *names):
    missing = [n for n in names if getattr(args, n.replace("-", "_")) is None]
    if missing:
        raise ValidationError("missing " + ", ".join("--" + n for n in missing))


def in_model_dir(args, value, default):
    return value if value is not None else os.path.join(args.model_dir, default)


def load_institutions(args, cfg):
    if args.institutions:
        return engine.read_institutions(args.institutions)
    return synthcohort.generate_institutions(cfg.seed, cfg.n_institutions, cfg.refusal_rate)


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------


def cmd_gen_cohort(args, spec, cfg):
    need(args, "out")
    visits = synthcohort.generate_cohort(spec)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    write_cohort(args.out, visits)
    if args.institutions:
        profiles = synthcohort.generate_institutions(cfg.seed, cfg.n_institutions, cfg.refusal_rate)
        engine.write_institutions(args.institutions, profiles)
    return {"visits": len(visits), "subjects": len({v.subject_id for v in visits})}


def cmd_train_mcml(args, spec, cfg):
    need(args, "cohort", "model-dir")
    width, train, val, _ = load_splits(args.cohort, cfg)
    model, res, (X, _) = pipeline.train_mcml(train, val, cfg, width)
    model.save(args.model_dir)
    write_json(os.path.join(args.model_dir, "backbone_curve.json"), {"loss": res.loss_curve, "val": res.val_curve, "best_epoch": res.best_epoch})
    return {"samples": int(X.shape[0]), "epochs": len(res.loss_curve)}


def cmd_fit_openmax(args, spec, cfg):
    need(args, "cohort", "model-dir")
    width, train, _, _ = load_splits(args.cohort, cfg)
    model = OpenClinicalModel.load(args.model_dir)
    X, y, _ = pipeline.diagnosis_data(train, cfg.diag_strategies_per_visit, [cfg.seed, 10], width)
    cal = pipeline.fit_openmax(model, X, y, cfg)
    model.save(args.model_dir)
    write_json(os.path.join(args.model_dir, "weibull.json"), [m.to_dict() for m in cal.models])
    write_json(os.path.join(args.model_dir, "centers.json"), [c.to_list() for c in cal.centers])
    return {"thresholds": cal.thresholds.tolist()}


def cmd_gen_rewards(args, spec, cfg):
    need(args, "cohort", "model-dir")
    _, train, _, _ = load_splits(args.cohort, cfg)
    model = OpenClinicalModel.load(args.model_dir)
    records = pipeline.gen_rewards(model, train, cfg)
    out = in_model_dir(args, args.out, EXAMINATION_FILE)
    strategy.write_examination_dataset(out, records)
    return {"records": len(records)}


def cmd_train_dmarl(args, spec, cfg):
    need(args, "cohort", "model-dir")
    _, train, _, _ = load_splits(args.cohort, cfg)
    model = OpenClinicalModel.load(args.model_dir)
    records = strategy.read_examination_dataset(in_model_dir(args, args.rewards, EXAMINATION_FILE), train)
    res = pipeline.train_dmarl(model, records, cfg)
    model.save(args.model_dir)
    write_json(os.path.join(args.model_dir, "recommender_curve.json"), {"loss": res.loss_curve})
    return {"records": min(len(records), cfg.max_reward_records), "epochs": len(res.loss_curve)}


def cmd_diagnose(args, spec, cfg):
    need(args, "cohort", "model-dir")
    _, _, _, test = load_splits(args.cohort, cfg)
    model = OpenClinicalModel.load(args.model_dir)
    if model.calibration is None:
        raise ValidationError("model directory has no OpenMax calibration; run fit-openmax first")
    insts = pipeline.assign_institutions(test, load_institutions(args, cfg), cfg.seed)
    traces = pipeline.run_engine(model, test, insts, cfg, all_exams=args.all_exams)
    out = in_model_dir(args, args.out, TRACES_FILE)
    engine.write_traces(out, [(v.subject_id, v.visit_index, t) for v, t in zip(test, traces)])
    return {"traces": len(traces), "granted": sum(len(t.granted) for t in traces)}


def _aligned(path, test):
    by_key = {(sid, vi): t for sid, vi, t in engine.read_traces(path)}
    try:
        return [by_key[(v.subject_id, v.visit_index)] for v in test]
    except KeyError as e:
        raise ValidationError(f"{path}: no trace for test visit {e.args[0]}") from None


def cmd_evaluate(args, spec, cfg):
    need(args, "cohort", "model-dir")
    _, _, _, test = load_splits(args.cohort, cfg)
    model = OpenClinicalModel.load(args.model_dir)
    traces = _aligned(in_model_dir(args, args.traces, TRACES_FILE), test)
    baseline = _aligned(args.baseline, test) if args.baseline else None
    rep = pipeline.evaluate(model, test, traces, baseline, n_trials=args.trials, sample_size=args.sample_size, seed=cfg.seed)
    write_json(in_model_dir(args, args.out, REPORT_FILE), rep)
    keys = ("closed_set_accuracy", "known_accuracy", "open_accuracy", "granted_total", "n_strategies")
    return {k: rep.get(k) for k in keys} | {"unknown_sensitivity": rep["sensitivity"]["Unknown"]}


def cmd_census(args, spec, cfg):
    if args.traces is None:
        need(args, "model-dir")
    traces = [t for _, _, t in engine.read_traces(in_model_dir(args, args.traces, TRACES_FILE))]
    census = harness.strategy_census(traces)
    usage = harness.exam_usage_table(traces)
    if args.out:
        write_json(args.out, {"census": census, "usage": {k.name: v for k, v in usage.items()}})
    print(harness.format_usage(usage))
    print()
    print(harness.format_census(census))
    return {"strategies": len(census)}


COMMANDS = {
    "gen-cohort": (cmd_gen_cohort, "generate a synthetic cohort (and institution profiles)"),
    "train-mcml": (cmd_train_mcml, "train the backbone classifier on the training split"),
    "fit-openmax": (cmd_fit_openmax, "fit class centers and Weibull tail models"),
    "gen-rewards": (cmd_gen_rewards, "build the examination dataset from strategy-pair rewards"),
    "train-dmarl": (cmd_train_dmarl, "train the examination recommender"),
    "diagnose": (cmd_diagnose, "run the dynamic diagnosis on the test split"),
    "evaluate": (cmd_evaluate, "metrics and bootstrap intervals for a set of traces"),
    "census": (cmd_census, "examination usage and strategy tables"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="overrides the seeds in the config")
    common.add_argument("--config", help="run config JSON with optional 'cohort' and 'pipeline' sections")
    common.add_argument("--out", help="output path")
    common.add_argument("--cohort", help="cohort JSON Lines file")
    common.add_argument("--institutions", help="institution profiles JSON")
    common.add_argument("--model-dir", help="directory holding the model files")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="openclinical", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_)
        if name == "train-dmarl":
            p.add_argument("--rewards", help=f"examination dataset (default MODEL_DIR/{EXAMINATION_FILE})")
        if name == "diagnose":
            p.add_argument("--all-exams", action="store_true", help="recommend every exam each round (baseline)")
        if name in ("evaluate", "census"):
            p.add_argument("--traces", help=f"traces JSON Lines (default MODEL_DIR/{TRACES_FILE})")
        if name == "evaluate":
            p.add_argument("--baseline", help="baseline traces to compare against")
            p.add_argument("--trials", type=int, default=harness.BOOT_TRIALS)
            p.add_argument("--sample-size", type=int, default=harness.BOOT_SAMPLE)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    fn, _ = COMMANDS[args.command]
    try:
        spec, cfg = load_config(args.config, args.seed)
        summary = fn(args, spec, cfg)
    except (ValidationError, ValueError, KeyError, FileNotFoundError, RuntimeError) as e:
        print(f"openclinical {args.command}: error: {e}", file=sys.stderr)
        return 2
    print(json.dumps(summary, sort_keys=True), file=sys.stderr if args.command == "census" else sys.stdout)
    return 0


if __name__ == "__main__":
    sys.exit(main())
