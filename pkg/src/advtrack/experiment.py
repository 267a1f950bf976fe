"""Experiment runner and report writer.

An experiment is (tracker x attack x protocol x dataset).  Every sequence is
run twice with the same seeds, once clean and once under attack, and the
report pairs the two.  Configs are INI files::

    [experiment]
    tracker = siamcorr        ; siamcorr | tinyformer
    attack = spark            ; rtaa | spark | iou | csa | none
    protocol = ope            ; ope | anchor
    target = bbox             ; bbox | mask
    seed = 0
    jobs = 1
    timeout_sec = 300

    [dataset]
    count = 20                ; or: path = /some/dataset
    length = 100

    [attack]
    epsilon = 10.2

    [sweep]
    param = epsilon
    values = 2.55, 5.1, 10.2, 20.4, 40.8
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import json
import logging
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

import advtrack
from advtrack import attacks as A
from advtrack import evaluation as E
from advtrack.data import SequenceRecord, load_dataset, synth_suite
from advtrack.metrics import SUPER_PERTURBED_BELOW, count_super_perturbed
from advtrack.trackers import ATTACK_IDS, SiamCorrTracker, applicable
from advtrack.trackers.tinyformer import TinyFormerTracker

log = logging.getLogger(__name__)

TRACKERS = {"siamcorr": SiamCorrTracker, "tinyformer": TinyFormerTracker}
PROTOCOLS = ("ope", "anchor")
TARGETS = ("bbox", "mask")
SWEEP_DEFAULTS = {"epsilon": A.EPSILON_LEVELS, "zeta": A.ZETA_LEVELS}
ATTACK_LABELS = {"rtaa": "RTAA", "spark": "SPARK", "iou": "IoU", "csa": "CSA"}
METRIC_LABELS = {
    "eao": "EAO", "accuracy": "Accuracy", "robustness": "Robustness",
    "auc": "AUC", "precision_at_20": "Precision", "norm_precision": "NormPrecision",
    "ao": "AO", "sr_050": "SR0.50", "sr_075": "SR0.75",
}
PROTOCOL_METRICS = {
    "ope": ("auc", "precision_at_20", "norm_precision", "ao", "sr_050", "sr_075"),
    "anchor": ("eao", "accuracy", "robustness"),
}
SUMMARY_HEADER = ("tracker", "attack", "metric", "clean", "attack", "drop")
DIAGNOSTICS_HEADER = ("sequence", "frame", "ssim", "l1", "super_perturbed")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class DatasetSpec:
    path: str | None = None
    count: int = 20
    length: int = 100
    height: int = 128
    width: int = 128
    seed: int | None = None  # defaults to the master seed

    def load(self, master_seed: int) -> list[SequenceRecord]:
        if self.path:
            return load_dataset(self.path)
        seed = master_seed if self.seed is None else self.seed
        return synth_suite(self.count, self.length, (self.height, self.width), seed=seed)


@dataclass(frozen=True)
class ExperimentConfig:
    tracker: str = "siamcorr"
    tracker_params: dict = field(default_factory=dict)
    attack: str | None = None
    attack_config: A.AttackConfig = field(default_factory=A.AttackConfig)
    protocol: str = "ope"
    target: str = "bbox"
    seed: int = 0
    jobs: int = 1
    timeout_sec: float = 300.0
    horizon: int | None = None  # EAO horizon; median sequence length when unset
    failure_threshold: float = E.FAILURE_THRESHOLD
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    sweep_param: str | None = None
    sweep_values: tuple[float, ...] = ()

    def __post_init__(self):
        if self.tracker not in TRACKERS:
            raise ConfigError(f"unknown tracker {self.tracker!r}; expected one of {', '.join(TRACKERS)}")
        if self.attack is not None and self.attack not in ATTACK_IDS:
            raise ConfigError(f"unknown attack {self.attack!r}; expected one of {', '.join(ATTACK_IDS)} or none")
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}; expected ope or anchor")
        if self.target not in TARGETS:
            raise ConfigError(f"unknown target {self.target!r}; expected bbox or mask")
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")
        if not self.timeout_sec > 0:
            raise ConfigError("timeout_sec must be positive")
        if self.horizon is not None and self.horizon < 1:
            raise ConfigError("horizon must be at least 1")
        if self.sweep_param is not None and self.sweep_param not in SWEEP_DEFAULTS:
            raise ConfigError(f"sweep param must be epsilon or zeta, got {self.sweep_param!r}")

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["attack_config"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["attack_config"].items()}
        d["sweep_values"] = list(self.sweep_values)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _convert(raw: str, like, key: str):
    try:
        if isinstance(like, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            return tuple(float(v) for v in raw.split(","))
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    return raw


_EXPERIMENT_KEYS = {"tracker", "attack", "protocol", "target", "seed", "jobs", "timeout_sec",
                    "horizon", "failure_threshold"}


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from None
    unknown = set(cp.sections()) - {"experiment", "tracker", "dataset", "attack", "sweep"}
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {', '.join(sorted(unknown))}")
    defaults = ExperimentConfig()
    kw: dict = {}
    if cp.has_section("experiment"):
        for key, raw in cp.items("experiment"):
            if key not in _EXPERIMENT_KEYS:
                raise ConfigError(f"{source}: unknown key [experiment] {key}")
            like = {"attack": "", "horizon": 0}.get(key, getattr(defaults, key))
            kw[key] = _convert(raw, like, f"[experiment] {key}")
    if str(kw.get("attack", "")).lower() in ("", "none", "clean"):
        kw["attack"] = None
    for k in ("tracker", "attack", "protocol", "target"):
        if isinstance(kw.get(k), str):
            kw[k] = kw[k].lower()
    if cp.has_section("tracker"):
        kw["tracker_params"] = {k: _convert(v, 0, f"[tracker] {k}") for k, v in cp.items("tracker")}
    if cp.has_section("dataset"):
        ds = DatasetSpec()
        dkw = {}
        for key, raw in cp.items("dataset"):
            if key == "path":
                dkw[key] = raw
            elif key in ("count", "length", "height", "width", "seed"):
                dkw[key] = _convert(raw, 0, f"[dataset] {key}")
            else:
                raise ConfigError(f"{source}: unknown key [dataset] {key}")
        kw["dataset"] = dataclasses.replace(ds, **dkw)
    akw = {}
    if cp.has_section("attack"):
        base = A.AttackConfig()
        for key, raw in cp.items("attack"):
            if not hasattr(base, key):
                raise ConfigError(f"{source}: unknown key [attack] {key}")
            akw[key] = _convert(raw, getattr(base, key), f"[attack] {key}")
    akw.setdefault("seed", kw.get("seed", 0))
    try:
        kw["attack_config"] = A.AttackConfig(**akw)
    except ValueError as e:
        raise ConfigError(f"{source}: [attack] {e}") from None
    if cp.has_section("sweep"):
        sw = dict(cp.items("sweep"))
        extra = set(sw) - {"param", "values"}
        if extra:
            raise ConfigError(f"{source}: unknown key [sweep] {', '.join(sorted(extra))}")
        param = sw.get("param", "").strip().lower() or None
        kw["sweep_param"] = param
        if "values" in sw:
            kw["sweep_values"] = _convert(sw["values"], (), "[sweep] values")
    return ExperimentConfig(**kw)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, str(path))


def make_tracker(cfg: ExperimentConfig):
    try:
        return TRACKERS[cfg.tracker](**cfg.tracker_params)
    except TypeError as e:
        raise ConfigError(f"[tracker] {e}") from None


def check_applicable(cfg: ExperimentConfig, tracker) -> None:
    if cfg.attack is not None and not applicable(cfg.attack, tracker.capabilities):
        A._require(cfg.attack, tracker)
    if cfg.target == "mask" and not tracker.capabilities.exposes_mask:
        raise ConfigError(f"tracker {cfg.tracker!r} emits no masks; use target = bbox")


def expand_sweep(cfg: ExperimentConfig, param: str | None = None, values: Sequence[float] | None = None
                 ) -> list[ExperimentConfig]:
    """One config per sweep level, each with the attack parameter set to that level."""
    param = param or cfg.sweep_param
    if param not in SWEEP_DEFAULTS:
        raise ConfigError(f"sweep param must be epsilon or zeta, got {param!r}")
    if cfg.attack is None:
        raise ConfigError("a sweep needs an attack")
    values = tuple(values or cfg.sweep_values or SWEEP_DEFAULTS[param])
    return [cfg.replace(attack_config=cfg.attack_config.replace(**{param: float(v)}),
                        sweep_param=param, sweep_values=values) for v in values]


# ---------------------------------------------------------------------------
# execution


@dataclass
class SequenceRecordResult:
    """Raw outcome of one sequence under one condition (clean or attacked)."""

    name: str
    status: str = "ok"  # ok | skipped
    reason: str = ""
    overlaps: list[float] = field(default_factory=list)
    center_errors: list[float] = field(default_factory=list)
    norm_errors: list[list[float]] = field(default_factory=list)
    anchor_runs: list[dict] = field(default_factory=list)
    frames: list[dict] = field(default_factory=list)  # per-frame perturbation diagnostics
    checksum: str = ""


class _HashingSession(A.AttackSession):
    """Attack session that folds every perturbation into a running sha256."""

    def __init__(self, *a, digest=None, sink=None, **kw):
        super().__init__(*a, **kw)
        self.digest = digest
        self.sink = sink

    def step(self, state, frame, frame_index):
        res = self.attack_frame(state, frame, frame_index)
        self.digest.update(np.ascontiguousarray(res.perturbation.values, dtype=np.float64).tobytes())
        self.sink.append({"frame": frame_index, "ssim": res.ssim, "l1": res.l1})
        if res.mapping is not None:
            out = self.tracker.track_region(state, res.adversarial, res.mapping)
        else:
            out = self.tracker.track(state, res.adversarial)
        return out, res.diagnostics


def _run_condition(cfg: ExperimentConfig, tracker, seq: SequenceRecord, attacked: bool,
                   deadline: float) -> SequenceRecordResult:
    rec = SequenceRecordResult(seq.name)
    digest = hashlib.sha256()
    t0 = time.monotonic()

    def runner(k: int = 0):
        if not attacked:
            return E.CleanRunner(tracker)
        return _HashingSession(cfg.attack, tracker, cfg.attack_config, seq.name, run=k,
                               digest=digest, sink=rec.frames)

    def should_stop():
        return time.monotonic() > deadline

    try:
        if cfg.protocol == "ope":
            res = E.run_ope(runner(), seq, cfg.target, should_stop)
            rec.overlaps = [float(v) for v in res.overlaps]
            rec.center_errors = [float(v) for v in res.center_errors]
            rec.norm_errors = [[float(x), float(y)] for x, y in res.norm_errors]
        else:
            runs = E.anchor_evaluate(runner, seq, mode=cfg.target, failure_threshold=cfg.failure_threshold,
                                     should_stop=should_stop)
            rec.anchor_runs = [dataclasses.asdict(r) for r in runs]
            rec.overlaps = [float(v) for r in runs for v in r.run_overlaps]
    except TimeoutError as e:
        rec = SequenceRecordResult(seq.name, "skipped", f"timeout after {cfg.timeout_sec:g} s ({e})")
    rec.checksum = digest.hexdigest() if attacked and rec.status == "ok" else ""
    log.info("%s %s: %s in %.1f s", seq.name, "attack" if attacked else "clean", rec.status, time.monotonic() - t0)
    return rec


_WORKER_TRACKERS: dict = {}


def _sequence_task(args) -> tuple[SequenceRecordResult | None, SequenceRecordResult | None]:
    cfg, seq, do_clean, factory = args
    key = (cfg.tracker, json.dumps(cfg.tracker_params, sort_keys=True)) if factory is None else None
    if key is None:
        tracker = factory()
    else:
        tracker = _WORKER_TRACKERS.get(key) or _WORKER_TRACKERS.setdefault(key, make_tracker(cfg))
    deadline = time.monotonic() + cfg.timeout_sec
    clean = _run_condition(cfg, tracker, seq, False, deadline) if do_clean else None
    if clean is not None and clean.status != "ok":
        return clean, SequenceRecordResult(seq.name, "skipped", "clean run skipped") if cfg.attack else None
    attacked = _run_condition(cfg, tracker, seq, True, deadline) if cfg.attack else None
    return clean, attacked


def _map_tasks(tasks, jobs: int):
    # results come back in submission order regardless of completion order
    if jobs <= 1 or len(tasks) <= 1:
        return [_sequence_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_sequence_task, tasks))


# ---------------------------------------------------------------------------
# aggregation


def _anchor_runs(rec: SequenceRecordResult) -> list[E.AnchorRun]:
    return [E.AnchorRun(**r) for r in rec.anchor_runs]


def bundle_for(records: Sequence[SequenceRecordResult], protocol: str, horizon: int) -> E.MetricBundle | None:
    ok = [r for r in records if r.status == "ok"]
    if not ok:
        return None
    if protocol == "ope":
        pooled = [E.SequenceResult(r.name, [], r.overlaps, center_errors=r.center_errors,
                                   norm_errors=np.asarray(r.norm_errors).reshape(-1, 2)) for r in ok]
        return E.ope_bundle(pooled)
    runs = [run for r in ok for run in _anchor_runs(r)]
    eao, acc, rob = E.anchor_metrics(runs, horizon)
    return E.MetricBundle(eao=eao, accuracy=acc, robustness=rob)


def _curves(records: Sequence[SequenceRecordResult]) -> dict | None:
    ok = [r for r in records if r.status == "ok" and r.center_errors]
    if not ok:
        return None
    ov = np.concatenate([r.overlaps for r in ok])
    ce = np.concatenate([r.center_errors for r in ok])
    ne = np.concatenate([np.asarray(r.norm_errors).reshape(-1, 2) for r in ok])
    return {
        "success": [[float(t), float(v)] for t, v in zip(E.SUCCESS_GRID, E.success_curve(ov))],
        "precision": [[float(t), float(v)] for t, v in zip(E.PRECISION_GRID, E.precision_curve(ce))],
        "norm_precision": [[float(t), float(v)] for t, v in zip(E.NORM_PRECISION_GRID, E.norm_precision_curve(ne))],
    }


def _diag_summary(records: Sequence[SequenceRecordResult], cfg_dict: dict) -> dict:
    frames = [f for r in records if r.status == "ok" for f in r.frames]
    ac = cfg_dict.get("attack_config", {})
    return {
        "frames": len(frames),
        "mean_ssim": float(np.mean([f["ssim"] for f in frames])) if frames else None,
        "mean_l1": float(np.mean([f["l1"] for f in frames])) if frames else None,
        "super_perturbed": count_super_perturbed([f["ssim"] for f in frames]),
        "super_perturbed_below": SUPER_PERTURBED_BELOW,
        "epsilon": ac.get("epsilon"),
        "zeta": ac.get("zeta"),
    }


def _drops(clean: E.MetricBundle | None, attacked: E.MetricBundle | None, protocol: str) -> dict:
    out = {}
    if clean is None or attacked is None:
        return out
    for m in PROTOCOL_METRICS[protocol]:
        c, a = getattr(clean, m), getattr(attacked, m)
        out[m] = None if c is None or a is None or c == 0 else E.drop_percentage(c, a)
    return out


@dataclass
class EvaluationReport:
    config: dict
    sequences: list[dict]
    aggregate: dict
    drops: dict
    diagnostics: dict
    curves: dict
    provenance: dict

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def tracker(self) -> str:
        return self.config["tracker"]

    @property
    def attack(self) -> str | None:
        return self.config["attack"]

    @property
    def protocol(self) -> str:
        return self.config["protocol"]


def _versions() -> dict:
    import scipy

    return {"advtrack": advtrack.__version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def assemble_report(cfg_dict: dict, clean: Sequence[SequenceRecordResult],
                    attacked: Sequence[SequenceRecordResult] | None) -> EvaluationReport:
    """Fold per-sequence raw records into a report.  Only sequences whose
    clean and attacked runs both finished enter the aggregates, so every
    attacked figure has a clean partner computed on the same frames."""
    protocol, horizon = cfg_dict["protocol"], cfg_dict["horizon"]
    attacked = list(attacked) if attacked is not None else None
    paired_ok = [c.status == "ok" and (attacked is None or attacked[i].status == "ok") for i, c in enumerate(clean)]
    clean_ok = [c for c, ok in zip(clean, paired_ok) if ok]
    att_ok = [a for a, ok in zip(attacked, paired_ok) if ok] if attacked is not None else []
    seqs = []
    for i, c in enumerate(clean):
        row = {"name": c.name, "status": "ok" if paired_ok[i] else "skipped",
               "reason": c.reason or (attacked[i].reason if attacked is not None else ""),
               "clean": dataclasses.asdict(c)}
        cb = bundle_for([c], protocol, horizon) if c.status == "ok" else None
        row["clean_metrics"] = cb.as_dict() if cb else None
        if attacked is not None:
            a = attacked[i]
            ab = bundle_for([a], protocol, horizon) if a.status == "ok" else None
            row["attack"] = dataclasses.asdict(a)
            row["attack_metrics"] = ab.as_dict() if ab else None
            row["checksum"] = a.checksum
        seqs.append(row)
    cb = bundle_for(clean_ok, protocol, horizon)
    ab = bundle_for(att_ok, protocol, horizon) if attacked is not None else None
    curves = {}
    if protocol == "ope":
        for label, recs in (("clean", clean_ok), ("attack", att_ok)):
            cv = _curves(recs)
            if cv is not None:
                curves[label] = cv
    return EvaluationReport(
        config=cfg_dict,
        sequences=seqs,
        aggregate={"clean": cb.as_dict() if cb else None, "attack": ab.as_dict() if ab else None},
        drops=_drops(cb, ab, protocol),
        diagnostics=_diag_summary(att_ok, cfg_dict),
        curves=curves,
        provenance={"config_hash": hashlib.sha256(json.dumps(cfg_dict, sort_keys=True).encode()).hexdigest(),
                    "seed": cfg_dict["seed"], "versions": _versions(),
                    "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds")},
    )


def _resolve_horizon(cfg: ExperimentConfig, seqs) -> ExperimentConfig:
    if cfg.horizon is not None or not seqs:
        return cfg
    return cfg.replace(horizon=int(np.median([len(s) for s in seqs])))


def run_experiment(cfg: ExperimentConfig, tracker_factory: Callable[[], object] | None = None,
                   sequences: Sequence[SequenceRecord] | None = None) -> EvaluationReport:
    """Clean run then attacked run on every sequence, paired by seed.

    ``tracker_factory`` overrides the configured tracker (it must be picklable
    when ``jobs > 1``); ``sequences`` overrides the configured dataset.
    """
    tracker = tracker_factory() if tracker_factory is not None else make_tracker(cfg)
    check_applicable(cfg, tracker)
    seqs = list(sequences) if sequences is not None else cfg.dataset.load(cfg.seed)
    cfg = _resolve_horizon(cfg, seqs)
    tasks = [(cfg, s, True, tracker_factory) for s in seqs]
    results = _map_tasks(tasks, cfg.jobs)
    clean = [r[0] for r in results]
    attacked = [r[1] for r in results] if cfg.attack else None
    return assemble_report(cfg.as_dict(), clean, attacked)


def run_sweep(cfg: ExperimentConfig, param: str | None = None, values: Sequence[float] | None = None,
              tracker_factory: Callable[[], object] | None = None,
              sequences: Sequence[SequenceRecord] | None = None) -> list[tuple[float, EvaluationReport]]:
    """Attack-level sweep; the clean pass is run once and paired with every level."""
    levels = expand_sweep(cfg, param, values)
    param = levels[0].sweep_param
    tracker = tracker_factory() if tracker_factory is not None else make_tracker(cfg)
    check_applicable(cfg, tracker)
    seqs = list(sequences) if sequences is not None else cfg.dataset.load(cfg.seed)
    cfg = _resolve_horizon(cfg, seqs)
    levels = [lc.replace(horizon=cfg.horizon) for lc in levels]
    clean_cfg = cfg.replace(attack=None)
    clean = [r[0] for r in _map_tasks([(clean_cfg, s, True, tracker_factory) for s in seqs], cfg.jobs)]
    out = []
    for lc in levels:
        att = [r[1] for r in _map_tasks([(lc, s, False, tracker_factory) for s in seqs], cfg.jobs)]
        # a sequence whose clean run timed out stays skipped at every level
        att = [a if c.status == "ok" else SequenceRecordResult(a.name, "skipped", "clean run skipped")
               for c, a in zip(clean, att)]
        out.append((getattr(lc.attack_config, param), assemble_report(lc.as_dict(), clean, att)))
    return out


def run_comparison(cfg: ExperimentConfig, attacks: Sequence[str],
                   tracker_factory: Callable[[], object] | None = None,
                   sequences: Sequence[SequenceRecord] | None = None) -> list[EvaluationReport]:
    """Several attacks against one tracker, all paired with a single clean pass."""
    cfgs = [cfg.replace(attack=a) for a in attacks]
    tracker = tracker_factory() if tracker_factory is not None else make_tracker(cfg)
    for c in cfgs:
        check_applicable(c, tracker)
    seqs = list(sequences) if sequences is not None else cfg.dataset.load(cfg.seed)
    horizon = _resolve_horizon(cfg, seqs).horizon
    clean_cfg = cfg.replace(attack=None, horizon=horizon)
    clean = [r[0] for r in _map_tasks([(clean_cfg, s, True, tracker_factory) for s in seqs], cfg.jobs)]
    out = []
    for c in cfgs:
        c = c.replace(horizon=horizon)
        att = [r[1] for r in _map_tasks([(c, s, False, tracker_factory) for s in seqs], cfg.jobs)]
        att = [a if cl.status == "ok" else SequenceRecordResult(a.name, "skipped", "clean run skipped")
               for cl, a in zip(clean, att)]
        out.append(assemble_report(c.as_dict(), clean, att))
    return out


def reaggregate(report: dict) -> EvaluationReport:
    """Rebuild aggregates, drops and curves from the raw records of a saved report."""
    def rec(d):
        return SequenceRecordResult(**d)

    try:
        cfg = report["config"]
        clean = [rec(s["clean"]) for s in report["sequences"]]
        attacked = [rec(s["attack"]) for s in report["sequences"]] if cfg.get("attack") else None
    except (KeyError, TypeError) as e:
        raise ConfigError(f"not a saved report: missing {e}") from None
    out = assemble_report(cfg, clean, attacked)
    out.provenance["timestamp"] = report.get("provenance", {}).get("timestamp", out.provenance["timestamp"])
    return out


# ---------------------------------------------------------------------------
# output


def _fmt(v) -> str:
    return "" if v is None else format(float(v), ".6g")


def summary_rows(report: EvaluationReport) -> list[tuple[str, ...]]:
    """``tracker,attack,metric,clean,attack,drop``; the drop is recomputed from
    the printed clean/attack strings so the file is self-consistent."""
    rows = []
    clean = report.aggregate.get("clean") or {}
    att = report.aggregate.get("attack") or {}
    attack_label = ATTACK_LABELS.get(report.attack or "", report.attack or "none")
    for m in PROTOCOL_METRICS[report.protocol]:
        c, a = clean.get(m), att.get(m)
        if c is None:
            continue
        cs, as_ = _fmt(c), _fmt(a)
        drop = ""
        if as_ and float(cs) != 0:
            drop = "%.2f" % E.drop_percentage(float(cs), float(as_))
        rows.append((report.tracker, attack_label, METRIC_LABELS[m], cs, as_, drop))
    return rows


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def report_json(report: EvaluationReport) -> str:
    return json.dumps(report.as_dict(), sort_keys=True, indent=1, allow_nan=False) + "\n"


def emit_report(reports: EvaluationReport | Sequence[EvaluationReport], out_dir, formats=("csv", "json")) -> list[Path]:
    """Write ``summary.csv``, ``curves/*.csv``, ``diagnostics.csv`` and ``report.json``.

    Several reports (e.g. one per tracker or attack) share one summary table;
    ``report.json`` then holds a list.
    """
    reports = [reports] if isinstance(reports, EvaluationReport) else list(reports)
    out = Path(out_dir)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        _write_csv(out / "summary.csv", SUMMARY_HEADER, [r for rep in reports for r in summary_rows(rep)])
        written.append(out / "summary.csv")
        diag_rows = []
        for rep in reports:
            for s in rep.sequences:
                if s["status"] != "ok" or "attack" not in s:
                    continue
                for f in s["attack"]["frames"]:
                    diag_rows.append((s["name"], f["frame"], "%.6f" % f["ssim"], "%.6g" % f["l1"],
                                      int(f["ssim"] < SUPER_PERTURBED_BELOW)))
        _write_csv(out / "diagnostics.csv", DIAGNOSTICS_HEADER, diag_rows)
        written.append(out / "diagnostics.csv")
        for rep in reports:
            for cond, curves in sorted(rep.curves.items()):
                tag = rep.attack or "none"
                for kind, pts in sorted(curves.items()):
                    p = out / "curves" / f"{rep.tracker}_{tag}_{cond}_{kind}.csv"
                    _write_csv(p, ("threshold", "value"), [("%.6g" % t, "%.6f" % v) for t, v in pts])
                    written.append(p)
    if "json" in formats:
        body = report_json(reports[0]) if len(reports) == 1 else \
            json.dumps([r.as_dict() for r in reports], sort_keys=True, indent=1, allow_nan=False) + "\n"
        (out / "report.json").write_text(body, encoding="utf-8")
        written.append(out / "report.json")
    return written


def emit_sweep(results: Sequence[tuple[float, EvaluationReport]], out_dir) -> Path:
    """One sub-directory per level plus ``sweep.csv`` with one row per level and metric."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value, rep in results:
        param = rep.config["sweep_param"]
        emit_report(rep, out / f"{param}_{value:g}")
        d = rep.diagnostics
        for tracker, attack, metric, c, a, drop in summary_rows(rep):
            rows.append((param, "%g" % value, tracker, attack, metric, c, a, drop, _fmt(d["mean_ssim"]),
                         _fmt(d["mean_l1"]), d["super_perturbed"]))
    p = out / "sweep.csv"
    _write_csv(p, ("param", "value", "tracker", "attack", "metric", "clean", "attack", "drop",
                   "mean_ssim", "mean_l1", "super_perturbed"), rows)
    return p


def strip_timestamp(report: dict) -> dict:
    d = json.loads(json.dumps(report))
    d.get("provenance", {}).pop("timestamp", None)
    return d
