"""Config ingestion, batch orchestration and file output.

Configs are JSON objects::

    {
      "experiment": "demo",
      "sequence": {"family": "binary_exponential"},
      "lambda": 0.5,
      "process": {"kind": "backoff"},
      "horizon": 1000,
      "replicas": 1,
      "base_seed": 42,
      "observers": {"window": 100, "sets": {"low": [1, 2, 3]}},
      "output": {"dir": "out", "format": "csv"},
      "synthetic_constants": false
    }

Only ``sequence``, ``lambda`` and ``process`` are required.  The accepted
``process`` keys per kind are listed in ``KIND_KEYS``.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from .classify import classify_range
from .constants import constants_for
from .engine import (Kind, Mode, PoissonStart, ProcessSpec, StandardCoupling, new_process)
from .errors import (BackoffLabError, InvariantViolation, ParseError, UnknownSeries,
                     ValidationError)
from .hls_volume import (Rule, check_axioms, random_domain_sample, random_sequence,
                         veb_run)
from .metrics import collect, summarize
from .recurrence import f_run, h_run
from .send_sequence import SendSequence, make_family

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_VIOLATIONS = 0, 1, 2, 3

SIM_KINDS = {k.value for k in Kind}
KIND_KEYS: dict[str, set[str]] = {
    "backoff": {"cohorts", "initial"},
    "j_jammed": {"j", "initial"},
    "externally_jammed": {"window", "initial"},
    "two_stream": {"initial"},
    "under_backoff": {"initial"},
    "constant_escape": {"j", "nu", "initial"},
    "escape": {"j", "sets", "set_floor", "initial"},
    "couple": {"pair", "lower_lambda"},
    "veb": {"j0", "arrival_shift"},
    "classify": {"j_lo", "j_hi"},
    "trace": {"what", "z", "gamma", "nu", "a", "T"},
    "hls_check": {"samples", "j_max"},
}
COUPLE_PAIRS = ("backoff/backoff", "two_stream/backoff", "under_backoff/backoff")
SUBCOMMAND_KINDS = {
    "simulate": SIM_KINDS,
    "couple": {"couple"},
    "veb": {"veb"},
    "classify": {"classify"},
    "trace": {"trace"},
    "hls-check": {"hls_check"},
}
_TOP_KEYS = {"experiment", "sequence", "lambda", "process", "horizon", "replicas",
             "base_seed", "observers", "output", "synthetic_constants"}


def fmt(x: Any) -> str:
    """Numbers with 17 significant digits; everything else via str."""
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return "" if x is None else str(x)


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class ExperimentConfig:
    sequence: dict
    lam: float
    process: dict
    experiment: str = "experiment"
    horizon: int = 1000
    replicas: int = 1
    base_seed: int = 0
    observers: dict = field(default_factory=dict)
    output: dict = field(default_factory=lambda: {"dir": "out", "format": "csv"})
    synthetic_constants: bool = False

    @property
    def kind(self) -> str:
        return self.process["kind"]

    @property
    def fmt(self) -> str:
        return self.output.get("format", "csv")

    @property
    def window(self) -> int:
        return int(self.observers.get("window", max(1, self.horizon // 10)))

    def seq(self) -> SendSequence:
        return make_family(self.sequence)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _validate(raw: Mapping[str, Any]) -> list[str]:
    bad: list[str] = []
    for k in sorted(set(raw) - _TOP_KEYS):
        bad.append(f"unknown key {k!r}")
    for k in ("sequence", "lambda", "process"):
        if k not in raw:
            bad.append(f"missing required key {k!r}")

    lam = raw.get("lambda")
    if "lambda" in raw and not (_is_num(lam) and 0.0 < lam < 1.0):
        bad.append("birth rate out of range: lambda must lie in (0, 1)")
    seq = raw.get("sequence")
    if "sequence" in raw:
        if not isinstance(seq, dict):
            bad.append("sequence must be an object")
        else:
            try:
                make_family(seq)
            except BackoffLabError as exc:
                bad.append(f"sequence: {exc}")
    h = raw.get("horizon", 0)
    if not (_is_int(h) and h >= 0):
        bad.append("horizon must be a non-negative integer")
    r = raw.get("replicas", 1)
    if not (_is_int(r) and r >= 1):
        bad.append("replicas must be a positive integer")
    s = raw.get("base_seed", 0)
    if not (_is_int(s) and 0 <= s < 2 ** 64):
        bad.append("base_seed must be an integer in [0, 2**64)")
    if not isinstance(raw.get("synthetic_constants", False), bool):
        bad.append("synthetic_constants must be true or false")

    out = raw.get("output", {})
    if not isinstance(out, dict):
        bad.append("output must be an object")
    elif out.get("format", "csv") not in ("csv", "jsonl"):
        bad.append("output format must be csv or jsonl")
    obs = raw.get("observers", {})
    if not isinstance(obs, dict):
        bad.append("observers must be an object")
    else:
        w = obs.get("window", 1)
        if not (_is_int(w) and w >= 1):
            bad.append("observer window must be a positive integer")
        for name, S in (obs.get("sets") or {}).items():
            if not (isinstance(S, list) and all(_is_int(i) and i >= 1 for i in S)):
                bad.append(f"observer set {name!r} must be a list of bin indices >= 1")

    proc = raw.get("process")
    if "process" in raw:
        if not isinstance(proc, dict) or "kind" not in proc:
            bad.append("process must be an object with a kind")
        else:
            bad.extend(_validate_process(proc, lam if _is_num(lam) else None))
    return bad


def _validate_process(proc: Mapping[str, Any], lam: float | None) -> list[str]:
    bad: list[str] = []
    kind = proc["kind"]
    if kind not in KIND_KEYS:
        return [f"unknown process kind {kind!r}"]
    for k in sorted(set(proc) - KIND_KEYS[kind] - {"kind"}):
        bad.append(f"process key {k!r} not accepted by kind {kind}")

    def pos_int(key: str, required: bool = True) -> None:
        if key not in proc:
            if required:
                bad.append(f"{kind} needs {key}")
            return
        v = proc[key]
        if not (_is_int(v) and v >= 1):
            bad.append(f"{key} must be a positive integer")

    if kind in ("j_jammed", "constant_escape", "escape"):
        pos_int("j")
    if kind == "externally_jammed":
        pos_int("window", required=False)
    if kind == "backoff":
        pos_int("cohorts", required=False)
    if kind == "constant_escape":
        nu = proc.get("nu")
        if not (_is_num(nu) and 0.0 <= nu <= 1.0):
            bad.append("nu must lie in [0, 1]")
    if kind == "escape":
        sets = proc.get("sets", [])
        if not (isinstance(sets, list) and all(isinstance(s, list) for s in sets)):
            bad.append("sets must be a list of lists")
    if kind == "veb":
        pos_int("j0")
        if _is_int(proc.get("j0")) and proc["j0"] < 2:
            bad.append("j0 must be at least 2")
        if lam is not None and not lam < 1.0 / 120.0:
            bad.append("birth rate out of range for veb: lambda must be below 1/120")
        if proc.get("arrival_shift", 1) not in (0, 1):
            bad.append("arrival_shift must be 0 or 1")
    if kind == "couple":
        if proc.get("pair") not in COUPLE_PAIRS:
            bad.append(f"pair must be one of {', '.join(COUPLE_PAIRS)}")
        ll = proc.get("lower_lambda")
        if ll is not None and not (_is_num(ll) and 0.0 < ll < 1.0):
            bad.append("lower_lambda must lie in (0, 1)")
        if ll is not None and lam is not None and _is_num(ll) and ll > lam:
            bad.append("lower_lambda must not exceed lambda")
    if kind == "classify":
        pos_int("j_lo")
        pos_int("j_hi")
        if _is_int(proc.get("j_lo")) and _is_int(proc.get("j_hi")) and proc["j_lo"] > proc["j_hi"]:
            bad.append("j_lo must not exceed j_hi")
    if kind == "trace":
        if proc.get("what", "f") not in ("f", "h"):
            bad.append("trace what must be f or h")
        pos_int("T", required=False)
        for key in ("z", "gamma", "a"):
            v = proc.get(key)
            if v is not None and not (isinstance(v, list) and all(_is_num(x) for x in v)):
                bad.append(f"{key} must be a list of numbers")
    if kind == "hls_check":
        pos_int("samples", required=False)
        pos_int("j_max", required=False)
    init = proc.get("initial")
    if init is not None and init not in ("empty", "stationary") and not (
            isinstance(init, list) and all(_is_int(x) and x >= 0 for x in init)):
        bad.append("initial must be 'empty', 'stationary' or a list of counts")
    return bad


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno, exc.colno) from None
    if not isinstance(raw, dict):
        raise ParseError("config must be a JSON object", 1, 1)
    bad = _validate(raw)
    if bad:
        raise ValidationError(bad)
    return ExperimentConfig(
        sequence=raw["sequence"], lam=float(raw["lambda"]), process=raw["process"],
        experiment=raw.get("experiment", "experiment"), horizon=raw.get("horizon", 1000),
        replicas=raw.get("replicas", 1), base_seed=raw.get("base_seed", 0),
        observers=raw.get("observers", {}),
        output=raw.get("output", {"dir": "out", "format": "csv"}),
        synthetic_constants=raw.get("synthetic_constants", False))


def render(config: ExperimentConfig) -> str:
    return json.dumps(config.as_dict(), indent=2, sort_keys=True) + "\n"


# ------------------------------------------------------------------ writers

RECORD_FIELDS = ("experiment", "replica", "seed", "x", "metric", "value")


class RecordWriter:
    """Single writer per file; rows are flushed in the order given."""

    def __init__(self, path: Path, fmt_: str, fields: Sequence[str] = RECORD_FIELDS):
        self.path, self.fmt, self.fields = path, fmt_, tuple(fields)
        self._fh = open(path, "w", newline="", encoding="utf-8")
        if fmt_ == "csv":
            self._csv = csv.writer(self._fh, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
            self._csv.writerow(self.fields)

    def write(self, row: Mapping[str, Any]) -> None:
        if self.fmt == "csv":
            self._csv.writerow([fmt(row.get(k)) for k in self.fields])
        else:
            self._fh.write(json.dumps(_jsonable(row), sort_keys=True) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "RecordWriter":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


def _jsonable(v: Any) -> Any:
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (frozenset, set)):
        return sorted(_jsonable(x) for x in v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return f if math.isfinite(f) else str(f)
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    if hasattr(v, "value") and not isinstance(v, (int, str)):
        return v.value
    return v


def replica_seed(base: int, index: int) -> int:
    return base ^ index


# ------------------------------------------------------------------ experiments

@dataclass
class Outcome:
    paths: dict[str, Path]
    violations: int = 0
    failures: int = 0

    @property
    def exit_code(self) -> int:
        return EXIT_VIOLATIONS if self.violations else EXIT_OK


def _initial(cfg: ExperimentConfig, spec: ProcessSpec, seq: SendSequence) -> Any:
    init = cfg.process.get("initial", "empty")
    if init == "empty":
        return None
    if init == "stationary":
        width = spec.j if spec.j is not None else cfg.process.get("window") or 16
        means = cfg.lam * seq.weights(width + 1)[1:] / spec.groups
        return PoissonStart(np.tile(means, (spec.groups, 1)))
    counts = np.asarray(init, dtype=np.int64)
    return np.tile(counts, (spec.groups, 1)) if spec.groups > 1 else counts


def _spec(cfg: ExperimentConfig) -> ProcessSpec:
    p = cfg.process
    kind = Kind(p["kind"])
    if kind is Kind.EXTERNALLY_JAMMED:
        return ProcessSpec(kind, j=p.get("window"))
    if kind is Kind.ESCAPE:
        from .engine import escape
        floor = p.get("set_floor")
        if floor is None and cfg.synthetic_constants:
            floor = constants_for(cfg.lam, True).rule.set_floor
        return escape(p["j"], p.get("sets", []), cfg.lam, floor)
    return ProcessSpec(kind, j=p.get("j"), nu=float(p.get("nu", 0.0)),
                       cohorts=int(p.get("cohorts", 1)))


def _simulate(cfg: ExperimentConfig, out: Path) -> Outcome:
    seq = cfg.seq()
    spec = _spec(cfg)
    sets = cfg.observers.get("sets") or {}
    traces, failures = [], 0
    rec_path = out / f"records.{cfg.fmt}"
    with RecordWriter(rec_path, cfg.fmt) as w:
        for r in range(cfg.replicas):
            seed = replica_seed(cfg.base_seed, r)
            base = {"experiment": cfg.experiment, "replica": r, "seed": seed}
            try:
                proc = new_process(spec, seq, cfg.lam, initial=_initial(cfg, spec, seq),
                                   seed=seed)
                tr = collect(proc, cfg.horizon, sets)
            except BackoffLabError as exc:
                failures += 1
                w.write({**base, "x": "", "metric": "failure",
                         "value": f"{type(exc).__name__}: {exc}"})
                continue
            traces.append(tr)
            summ = summarize(tr, cfg.window)
            for rec in summ.windows:
                for k, v in rec.row().items():
                    if k != "window_start":
                        w.write({**base, "x": rec.window_start, "metric": k, "value": v})
            w.write({**base, "x": cfg.horizon, "metric": "sojourn",
                     "value": "censored" if summ.sojourn[0] is None else summ.sojourn[0]})
    paths = {"records": rec_path}
    if traces:
        paths["summary"] = _write_summary(traces, cfg, out)
    return Outcome(paths, failures=failures)


def _write_summary(traces: list[dict], cfg: ExperimentConfig, out: Path) -> Path:
    keys = [k for k in traces[0] if k != "final_occupancy"]
    merged = {k: np.concatenate([t[k] for t in traces], axis=1) for k in keys}
    width = max(t["final_occupancy"].shape[1] for t in traces)
    occ = np.zeros((len(traces), width))
    for i, t in enumerate(traces):
        occ[i, :t["final_occupancy"].shape[1]] = t["final_occupancy"][0]
    merged["final_occupancy"] = occ
    summ = summarize(merged, cfg.window)
    rows = summ.rows()
    path = out / "summary.csv"
    names = sorted((cfg.observers.get("sets") or {}).keys())
    fields = ["window_start", "backlog_mean"] + [f"noise_{n}" for n in names] + [
        "escapes_cum", "empty_visits", "max_bin"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(fields)
        for row in rows:
            wr.writerow([fmt(row[f]) for f in fields])
    if summ.bin_mean is not None:
        with open(out / "bins.csv", "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["bin", "mean", "var"])
            for i in range(1, len(summ.bin_mean)):
                wr.writerow([i, fmt(summ.bin_mean[i]), fmt(summ.bin_var[i])])
    return path


def _couple(cfg: ExperimentConfig, out: Path) -> Outcome:
    seq = cfg.seq()
    pair = cfg.process["pair"]
    lo_kind = pair.split("/")[0]
    upper_lam = cfg.lam
    if lo_kind == "backoff":
        lo_spec, lo_lam = ProcessSpec(Kind.BACKOFF), cfg.process.get("lower_lambda", cfg.lam)
        up_spec = ProcessSpec(Kind.BACKOFF)
    elif lo_kind == "two_stream":
        lo_spec, lo_lam = ProcessSpec(Kind.TWO_STREAM), cfg.lam
        up_spec = ProcessSpec(Kind.BACKOFF, cohorts=2)
    else:
        lo_spec, lo_lam = ProcessSpec(Kind.UNDER_BACKOFF), cfg.lam
        up_spec = ProcessSpec(Kind.BACKOFF, cohorts=3)
    path = out / f"records.{cfg.fmt}"
    total, failures = 0, 0
    with RecordWriter(path, cfg.fmt) as w:
        for r in range(cfg.replicas):
            seed = replica_seed(cfg.base_seed, r)
            base = {"experiment": cfg.experiment, "replica": r, "seed": seed}
            try:
                lo = new_process(lo_spec, seq, lo_lam, mode=Mode.IDENTITY, seed=seed)
                up = new_process(up_spec, seq, upper_lam, mode=Mode.IDENTITY, seed=seed)
                cp = StandardCoupling(lo, up, seed=seed)
                n = cp.run(cfg.horizon)
            except BackoffLabError as exc:
                failures += 1
                w.write({**base, "x": "", "metric": "failure",
                         "value": f"{type(exc).__name__}: {exc}"})
                continue
            total += n
            for v in cp.violations:
                w.write({**base, "x": v.t, "metric": f"violation_{v.name}",
                         "value": f"group={v.group} bin={v.bin_index} count={v.count}"})
            w.write({**base, "x": cfg.horizon, "metric": "violations", "value": n})
            w.write({**base, "x": cfg.horizon, "metric": "backlog_lower",
                     "value": int(lo.backlog[0])})
            w.write({**base, "x": cfg.horizon, "metric": "backlog_upper",
                     "value": int(up.backlog[0])})
    return Outcome({"records": path}, violations=total, failures=failures)


def _veb(cfg: ExperimentConfig, out: Path) -> Outcome:
    seq = cfg.seq()
    consts = constants_for(cfg.lam, cfg.synthetic_constants)
    path = out / "veb.jsonl"
    total, failures = 0, 0
    with open(path, "w", encoding="utf-8") as fh:
        for r in range(cfg.replicas):
            seed = replica_seed(cfg.base_seed, r)
            head = {"experiment": cfg.experiment, "replica": r, "seed": seed}
            try:
                tr = veb_run(seq, cfg.lam, cfg.process["j0"], cfg.horizon, seed, consts,
                             arrival_shift=cfg.process.get("arrival_shift", 1))
            except (BackoffLabError, ValueError) as exc:
                failures += 1
                fh.write(json.dumps({**head, "record": "failure",
                                     "error": f"{type(exc).__name__}: {exc}"},
                                    sort_keys=True) + "\n")
                continue
            for rec in tr.transitions:
                fh.write(json.dumps(_jsonable({**head, "record": "transition", **rec}),
                                    sort_keys=True) + "\n")
            summ = {**head, "record": "summary", **tr.summary(),
                    "well_formed": tr.well_formed()}
            fh.write(json.dumps(_jsonable(summ), sort_keys=True) + "\n")
            total += tr.i1_violations + tr.i2_violations + (0 if tr.well_formed() else 1)
    return Outcome({"records": path}, violations=total, failures=failures)


def _classify(cfg: ExperimentConfig, out: Path) -> Outcome:
    seq = cfg.seq()
    consts = constants_for(cfg.lam, cfg.synthetic_constants).classifier
    rows = classify_range(seq, cfg.lam, cfg.process["j_lo"], cfg.process["j_hi"], consts)
    path = out / "classify.csv"
    fields = ["j", "class", "prop1", "prop2", "prop3", "wtilde", "upsilon_wtilde", "log_weight"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(fields)
        for bc in rows:
            row = bc.row()
            wr.writerow([fmt(row[f]) for f in fields])
    return Outcome({"classify": path})


def _trace(cfg: ExperimentConfig, out: Path) -> Outcome:
    seq = cfg.seq()
    p = cfg.process
    T = int(p.get("T", cfg.horizon))
    if p.get("what", "f") == "f":
        z = p.get("z") or [0.0]
        gamma = p.get("gamma") or [0.0] * len(z)
        tr = f_run(seq, cfg.lam, gamma, z, T)
        name = "f"
    else:
        a = p.get("a") or [0.0]
        tr = h_run(seq, float(p.get("nu", 0.0)), a, T)
        name = "h"
    path = out / "trace.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["t"] + [f"{name}_{k}" for k in range(1, tr.j + 1)])
        for t, row in enumerate(tr.values):
            wr.writerow([t] + [fmt(v) for v in row])
    return Outcome({"trace": path})


def _hls_check(cfg: ExperimentConfig, out: Path) -> Outcome:
    n = int(cfg.process.get("samples", 1000))
    j_max = int(cfg.process.get("j_max", 32))
    consts = constants_for(cfg.lam, cfg.synthetic_constants)
    rng = np.random.default_rng(cfg.base_seed)
    path = out / "axioms.csv"
    total = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["replica", "axiom", "sample", "detail"])
        for r in range(cfg.replicas):
            rng = np.random.default_rng(replica_seed(cfg.base_seed, r))
            rule = Rule(random_sequence(rng), cfg.lam, consts)
            sample = [random_domain_sample(rule, rng, j_max) for _ in range(n)]
            bad = check_axioms(rule, sample, seed=replica_seed(cfg.base_seed, r))
            total += len(bad)
            for v in bad:
                wr.writerow([r, v.axiom, v.index, v.detail])
    return Outcome({"axioms": path}, violations=total)


RUNNERS = {"simulate": _simulate, "couple": _couple, "veb": _veb, "classify": _classify,
           "trace": _trace, "hls-check": _hls_check}


def subcommand_for(kind: str) -> str:
    for sub, kinds in SUBCOMMAND_KINDS.items():
        if kind in kinds:
            return sub
    raise ValidationError([f"no subcommand runs kind {kind!r}"])


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None,
                   subcommand: str | None = None) -> Outcome:
    """Run a config and write its artifacts plus manifest.json.

    Wall-clock time goes to timing.json so that every other file is a pure
    function of the config.
    """
    sub = subcommand or subcommand_for(config.kind)
    if config.kind not in SUBCOMMAND_KINDS[sub]:
        raise ValidationError([f"subcommand {sub} cannot run process kind {config.kind!r}"])
    out = Path(out_dir if out_dir is not None else config.output.get("dir", "out"))
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    res = RUNNERS[sub](config, out)
    elapsed = time.perf_counter() - t0
    manifest = {"tool": "backofflab", "version": __version__, "subcommand": sub,
                "config": {**config.as_dict(),
                           "output": {"format": config.fmt}},  # dir left out: outputs are location-free
                "files": sorted(p.name for p in res.paths.values()),
                "violations": res.violations, "failed_replicas": res.failures}
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "timing.json").write_text(json.dumps({"wall_seconds": elapsed}) + "\n",
                                     encoding="utf-8")
    res.paths["manifest"] = mpath
    return res


# ------------------------------------------------------------------ plot data

def read_records(path: str | Path) -> list[dict]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        if path.suffix == ".jsonl":
            return [json.loads(line) for line in fh if line.strip()]
        return list(csv.DictReader(fh))


def emit_plot_data(records: Iterable[Mapping[str, Any]], series: Sequence[str],
                   path: str | Path) -> Path:
    """Long CSV (series, x, y) for the requested metrics.

    Rows are ordered by x, then by the order of ``series``, so joined series
    interleave.  Asking for a metric absent from the records raises
    UnknownSeries.
    """
    records = list(records)
    present = {str(r["metric"]) for r in records}
    missing = [s for s in series if s not in present]
    if missing:
        raise UnknownSeries(", ".join(missing))
    order = {s: i for i, s in enumerate(series)}
    rows = [(float(r["x"]), order[str(r["metric"])], str(r["metric"]), r["x"], r["value"])
            for r in records if str(r["metric"]) in order and r.get("x", "") != ""]
    rows.sort(key=lambda t: (t[0], t[1]))
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["series", "x", "y"])
        for _, _, name, x, y in rows:
            wr.writerow([name, x, y])
    return path


# ------------------------------------------------------------------ entry point

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="backofflab", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in RUNNERS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--format", choices=("csv", "jsonl"))
        sp.add_argument("--synthetic-constants", action="store_true")
    pd = sub.add_parser("plotdata")
    pd.add_argument("--records", required=True)
    pd.add_argument("--series", required=True, help="comma-separated metric names")
    pd.add_argument("--out", default=".")
    return ap


def _apply_flags(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    d = cfg.as_dict()
    if args.seed is not None:
        d["base_seed"] = args.seed
    if args.format:
        d["output"] = {**d["output"], "format": args.format}
    if args.synthetic_constants:
        d["synthetic_constants"] = True
    if args.out:
        d["output"] = {**d["output"], "dir": args.out}
    return parse_config(json.dumps(d))


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    try:
        if args.command == "plotdata":
            series = [s for s in args.series.split(",") if s]
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            emit_plot_data(read_records(args.records), series, out / "plot.csv")
            return EXIT_OK
        cfg = _apply_flags(parse_config(Path(args.config).read_text(encoding="utf-8")), args)
        res = run_experiment(cfg, subcommand=args.command)
    except (ParseError, ValidationError, UnknownSeries) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_VIOLATIONS
    except (BackoffLabError, OSError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for name, p in sorted(res.paths.items()):
        print(f"{name}: {p}")
    return res.exit_code


if __name__ == "__main__":
    sys.exit(main())
