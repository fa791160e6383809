"""Stage functions tying the modules together, shared by the CLI and the end-to-end tests."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import backbone, engine, harness, openmax, recommender, strategy, synthcohort
from .domain import ENGINE_ORDER, KNOWN_LABELS, Label, StrategySet, VisitRecord, dense_input
from .model import OpenClinicalModel

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    seed: int = 7
    n_institutions: int = 40
    refusal_rate: float = 0.2
    split_fractions: tuple = (0.7, 0.05, 0.25)
    # backbone
    diag_strategies_per_visit: int = 24
    backbone: dict = field(default_factory=lambda: {"epochs": 25, "batch_size": 128, "lr": 5e-4})
    # openmax
    n_centers: int = 3
    quantile: float = 0.95
    tail_size: int = 20
    alpha: int = 2
    flag: bool = True
    normalize: str = "none"
    # rewards / recommender
    reward_strategies_per_visit: int = 24
    max_reward_records: int = 12000
    recommender: dict = field(default_factory=lambda: {"epochs": 8, "batch_size": 64, "lr": 5e-4})
    # engine
    delta: float = 0.95
    gamma: float = 0.5

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_fractions"] = list(self.split_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ValueError(f"unknown pipeline fields: {sorted(extra)}")
        return cls(**d)


def sample_strategies(v: VisitRecord, k: int, rng: np.random.Generator) -> StrategySet:
    """Up to ``k`` strategies of ``v`` drawn uniformly from the full enumeration.

    The Base-only and the complete strategy are always kept so the dataset
    spans both ends of the cost range.
    """
    full = strategy.enumerate_strategies(v)
    n = len(full)
    if n <= k:
        return full
    inner = rng.choice(np.arange(1, n - 1), size=k - 2, replace=False)
    keep = np.concatenate([[0], np.sort(inner), [n - 1]])
    return StrategySet(tuple(full[i] for i in keep))


def diagnosis_data(visits, k, seed, width):
    rng = np.random.default_rng(seed)
    ds = [sample_strategies(v, k, rng) for v in visits]
    return backbone.build_diagnosis_dataset(visits, ds, width)


def train_mcml(train: Sequence[VisitRecord], val: Sequence[VisitRecord], cfg: PipelineConfig, width: int):
    X, y, _ = diagnosis_data(train, cfg.diag_strategies_per_visit, [cfg.seed, 10], width)
    Xv, yv, _ = diagnosis_data(val, cfg.diag_strategies_per_visit, [cfg.seed, 11], width) if val else (None, None, None)
    bcfg = backbone.BackboneConfig(input_dim=X.shape[1], seed=cfg.seed, **cfg.backbone)
    res = backbone.train_backbone(X, y, bcfg, Xv, yv)
    log.info("backbone trained on %d samples, %d epochs", X.shape[0], len(res.loss_curve))
    return OpenClinicalModel(width, bcfg, res.params), res, (X, y)


def fit_openmax(model: OpenClinicalModel, X, y, cfg: PipelineConfig) -> openmax.OpenMaxCalibration:
    out = model.outputs(X)
    correct = np.argmax(out.activation, axis=1) == y
    per_class = [out.embedding[correct & (y == c)] for c in range(len(KNOWN_LABELS))]
    cal = openmax.calibrate(
        per_class,
        n_centers=cfg.n_centers,
        quantile=cfg.quantile,
        tail_size=cfg.tail_size,
        seed=cfg.seed,
        alpha=cfg.alpha,
        flag=cfg.flag,
        normalize=cfg.normalize,
    )
    model.calibration = cal
    return cal


def gen_rewards(model: OpenClinicalModel, visits: Sequence[VisitRecord], cfg: PipelineConfig):
    rng = np.random.default_rng([cfg.seed, 12])
    chosen = {}
    for v in sorted(visits, key=lambda v: (v.subject_id, v.visit_index)):
        if v.label.is_known:
            chosen[(v.subject_id, v.visit_index)] = sample_strategies(v, cfg.reward_strategies_per_visit, rng)
    out = []
    for v in sorted(visits, key=lambda v: (v.subject_id, v.visit_index)):
        if not v.label.is_known:
            continue
        ds = chosen[(v.subject_id, v.visit_index)]
        if len(ds) < 2:
            continue
        P = model.predict_strategies(v, ds)
        out.extend(strategy.compute_rewards(ds, {s: P[i] for i, s in enumerate(ds)}, strategy.one_hot(v.label.cls), v))
    return out


def train_dmarl(model: OpenClinicalModel, records, cfg: PipelineConfig):
    if not records:
        raise ValueError("empty examination dataset")
    rng = np.random.default_rng([cfg.seed, 13])
    if len(records) > cfg.max_reward_records:
        keep = np.sort(rng.choice(len(records), size=cfg.max_reward_records, replace=False))
        records = [records[i] for i in keep]
    rcfg = recommender.RecommenderConfig(width=model.width, seed=cfg.seed, **cfg.recommender)
    batch = recommender.batch_from_records(records, model.width)
    res = recommender.train_recommender(batch, rcfg)
    model.recommender_cfg = rcfg
    model.recommender_params = res.params
    return res


def assign_institutions(visits, profiles, seed):
    rng = np.random.default_rng([seed, 14])
    pick = rng.integers(len(profiles), size=len(visits))
    return [profiles[i] for i in pick]


def engine_config(cfg: PipelineConfig) -> engine.EngineConfig:
    return engine.EngineConfig(delta=(cfg.delta,) * 3, gamma=(cfg.gamma,) * 12)


def run_engine(model, visits, insts, cfg: PipelineConfig, all_exams: bool = False):
    ecfg = engine_config(cfg)
    m = engine.AllExamsPolicy(model) if all_exams else model
    return [engine.diagnose(v.rows, inst, m, ecfg)[1] for v, inst in zip(visits, insts)]


def evaluate(model, test: Sequence[VisitRecord], traces, baseline=None, n_trials=harness.BOOT_TRIALS, sample_size=harness.BOOT_SAMPLE, seed=0) -> dict:
    """Metrics for a finished run. ``traces`` align with ``test``."""
    truths = [v.label.cls for v in test]
    finals = [t.final.cls for t in traces]
    known = [i for i, v in enumerate(test) if v.label.is_known]
    unknown = [i for i, v in enumerate(test) if not v.label.is_known]
    rep: dict = {"n_test": len(test), "n_known": len(known), "n_unknown": len(unknown)}

    # closed set: backbone argmax on the complete visit data of known subjects
    if known:
        Xk = np.vstack([dense_input(test[i].rows, model.width) for i in known])
        out = model.outputs(Xk)
        yk = np.array([KNOWN_LABELS.index(truths[i]) for i in known])
        rep["closed_set_accuracy"] = float(np.mean(np.argmax(out.activation, axis=1) == yk))
        probs = backbone.nn.softmax(out.activation)
        rep["closed_set_auc"] = {}
        for c, lab in enumerate(KNOWN_LABELS):
            items = (probs[:, c], (yk == c).astype(float))
            rep["closed_set_auc"][lab.value] = harness.metric_report(f"AUC {lab.value}", harness.roc_auc, items, n_trials, sample_size, seed).to_dict()

    rep["open_accuracy"] = harness.accuracy(finals, truths)
    rep["known_accuracy"] = harness.accuracy([finals[i] for i in known], [truths[i] for i in known]) if known else None
    rep["sensitivity"] = {}
    rep["specificity"] = {}
    for lab in ENGINE_ORDER:
        s, sp = harness.sensitivity_specificity(finals, truths, lab)
        rep["sensitivity"][lab.value] = s
        rep["specificity"][lab.value] = sp
    rep["granted_total"] = int(sum(len(t.granted) for t in traces))
    rep["requested_total"] = int(sum(len(t.requested) for t in traces))
    rep["adjustments"] = int(sum(t.adjustments for t in traces))
    census = harness.strategy_census(traces)
    rep["n_strategies"] = len(census)
    if baseline is not None:
        bfin = [t.final.cls for t in baseline]
        rep["baseline_known_accuracy"] = harness.accuracy([bfin[i] for i in known], [truths[i] for i in known]) if known else None
        rep["baseline_unknown_sensitivity"] = harness.sensitivity_specificity(bfin, truths, Label.Unknown)[0]
        rep["baseline_granted_total"] = int(sum(len(t.granted) for t in baseline))
        rep["baseline_requested_total"] = int(sum(len(t.requested) for t in baseline))
    return rep


def run_pipeline(
    spec: synthcohort.CohortSpec | None = None,
    cfg: PipelineConfig | None = None,
    n_trials: int = 200,
    sample_size: int = harness.BOOT_SAMPLE,
) -> dict:
    """Generate, train, calibrate, diagnose and evaluate in one go."""
    spec = spec or synthcohort.CohortSpec()
    cfg = cfg or PipelineConfig(seed=spec.seed)
    t0 = time.perf_counter()
    timings = {}
    cohort = synthcohort.generate_cohort(spec)
    train, val, test = synthcohort.split(cohort, cfg.split_fractions, cfg.seed)
    profiles = synthcohort.generate_institutions(cfg.seed, cfg.n_institutions, cfg.refusal_rate)
    timings["cohort"] = time.perf_counter() - t0

    model, bres, (X, y) = train_mcml(train, val, cfg, spec.width)
    timings["train_mcml"] = time.perf_counter() - t0
    fit_openmax(model, X, y, cfg)
    timings["fit_openmax"] = time.perf_counter() - t0
    records = gen_rewards(model, train, cfg)
    timings["gen_rewards"] = time.perf_counter() - t0
    train_dmarl(model, records, cfg)
    timings["train_dmarl"] = time.perf_counter() - t0

    insts = assign_institutions(test, profiles, cfg.seed)
    traces = run_engine(model, test, insts, cfg)
    baseline = run_engine(model, test, insts, cfg, all_exams=True)
    timings["diagnose"] = time.perf_counter() - t0
    rep = evaluate(model, test, traces, baseline, n_trials=n_trials, sample_size=sample_size, seed=cfg.seed)
    timings["evaluate"] = time.perf_counter() - t0
    rep.update(
        n_train_visits=len(train),
        n_val_visits=len(val),
        n_records=len(records),
        n_distinct_institutions=len({p.executable for p in profiles}),
        timings=timings,
        census=harness.strategy_census(traces),
        usage={k.name: v for k, v in harness.exam_usage_table(traces).items()},
    )
    rep["_model"] = model
    rep["_traces"] = traces
    rep["_baseline"] = baseline
    rep["_test"] = test
    return rep
