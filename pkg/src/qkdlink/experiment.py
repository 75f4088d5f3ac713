"""Scenario configuration, sweeps, calibration and result files.

Configuration files are INI-style with dotted section names.  Physical
quantities carry their unit in the key name (``fiber_length_km``,
``window_ns``, ``blackbody_rate_hz`` ...).  A file starts from the canonical
scenario named by ``scenario.base`` and overrides individual fields::

    [scenario]
    base = electrical_sync_50km

    [source]
    mean_photon_number = 0.1

    [sweep]
    variable = mu
    from = 1e-3
    to = 1
    points = 31
    scale = log

Entries under ``[link.losses]`` add to or replace the base scenario's named
losses.  Unknown sections or keys are rejected with their dotted path.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import datetime as _dt
import hashlib
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import optimize

from . import __version__, postproc, security, simulate
from .errors import CalibrationError, ConfigError, DomainError, ThresholdError
from .photonics import DetectorModel, LinkBudget, SourceModel
from .protocol import InterferometerModel
from .security import Scenario, SecurityParams, SyncMode

# divide by these when parsing: the quotient rounds exactly like a literal
PER_NS = 1e9
PER_US = 1e6
MODES = ("analytic", "montecarlo", "both")
SWEEP_VARIABLES = {"mu": "mu", "distance": "distance_km", "window": "window_ns"}


# --- configuration --------------------------------------------------------------

@dataclass(frozen=True)
class SweepSpec:
    """Range for one swept variable; distances in km, windows in ns."""

    variable: str
    start: float
    stop: float
    points: int = 21
    scale: str = "linear"

    def __post_init__(self):
        if self.variable not in SWEEP_VARIABLES:
            raise ConfigError(f"must be one of {sorted(SWEEP_VARIABLES)}", "sweep.variable")
        if self.points < 1:
            raise ConfigError("must be >= 1", "sweep.points")
        if self.scale not in ("linear", "log"):
            raise ConfigError("must be 'linear' or 'log'", "sweep.scale")
        if self.scale == "log" and not (self.start > 0 and self.stop > 0):
            raise ConfigError("log sweeps need positive bounds", "sweep.from")
        if self.start < 0 or self.stop < 0:
            raise ConfigError("bounds must be >= 0", "sweep.from")

    @property
    def column(self):
        return SWEEP_VARIABLES[self.variable]

    def values(self):
        if self.scale == "log":
            return np.geomspace(self.start, self.stop, self.points)
        return np.linspace(self.start, self.stop, self.points)

    def apply(self, scenario, value):
        if self.variable == "mu":
            return scenario.with_mu(float(value))
        if self.variable == "distance":
            return scenario.with_length(float(value))
        return scenario.with_window(float(value) / PER_NS)


@dataclass(frozen=True)
class RunControls:
    mode: str = "analytic"
    n_slots: int = 1_000_000
    seed: int = 1
    sample_fraction: float = simulate.DEFAULT_SAMPLE_FRACTION
    security_margin: int = postproc.DEFAULT_MARGIN
    passes: int = postproc.DEFAULT_PASSES

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"must be one of {MODES}", "run.mode")
        if self.n_slots < 0:
            raise ConfigError("must be >= 0", "run.n_slots")
        if not (0 <= self.seed < 2**64):
            raise ConfigError("must be an unsigned 64-bit integer", "run.seed")
        if not (0 <= self.sample_fraction < 1):
            raise ConfigError("must lie in [0, 1)", "postproc.sample_fraction")
        if self.security_margin < 0:
            raise ConfigError("must be >= 0", "postproc.security_margin_bits")
        if not (1 <= self.passes <= 16):
            raise ConfigError("must lie in [1, 16]", "postproc.passes")


# section -> key -> parser; ``None`` marks free-form ``<component>_db`` keys
_SCHEMA = {
    "scenario": {"base": str, "sync_mode": str, "name": str},
    "source": {"mean_photon_number": float, "clock_rate_hz": float},
    "link": {"fiber_length_km": float, "attenuation_db_per_km": float},
    "link.losses": None,
    "detector": {"efficiency": float, "dead_time_us": float, "jitter_fwhm_ns": float,
                 "blackbody_rate_hz": float, "raman_rate_hz": float,
                 "raman_reference_window_ns": float},
    "interferometer": {"visibility": float, "protocol_efficiency": float,
                       "bit_delay_ns": float},
    "timing": {"window_ns": float},
    "security": {"qber_limit": float, "ec_inefficiency": float, "target_mu": float},
    "postproc": {"sample_fraction": float, "security_margin_bits": int, "passes": int},
    "run": {"mode": str, "n_slots": int, "seed": int},
    "sweep": {"variable": str, "from": float, "to": float, "points": int, "scale": str},
}


def _parser():
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cp.optionxform = str  # keys are case-sensitive
    return cp


def _parse_value(path, conv, raw):
    try:
        if conv is int:
            value = int(raw, 0)
        else:
            value = conv(raw)
    except ValueError:
        raise ConfigError(f"cannot parse {raw!r}", path) from None
    if isinstance(value, float) and not math.isfinite(value):
        raise ConfigError("must be finite", path)
    return value


def _read_sections(cp):
    data = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError("unknown section", section)
        schema = _SCHEMA[section]
        values = {}
        for key, raw in cp.items(section):
            path = f"{section}.{key}"
            if schema is None:
                if not key.endswith("_db"):
                    raise ConfigError("loss keys must end in _db", path)
                values[key[:-3]] = _parse_value(path, float, raw)
            elif key not in schema:
                raise ConfigError("unknown key", path)
            else:
                values[key] = _parse_value(path, schema[key], raw)
        data[section] = values
    return data


def _build(data):
    sc_sec = data.get("scenario", {})
    base_name = sc_sec.get("base", "electrical_sync_50km")
    try:
        base = security.canonical_scenario(base_name)
    except KeyError as exc:
        raise ConfigError(str(exc.args[0]), "scenario.base") from None
    name = sc_sec.get("name", base_name)

    def get(section, key, default):
        return data.get(section, {}).get(key, default)

    def nested(path, build):
        try:
            return build()
        except DomainError as exc:
            raise ConfigError(str(exc), path) from None

    source = nested("source", lambda: SourceModel(
        get("source", "mean_photon_number", base.source.mean_photon_number),
        get("source", "clock_rate_hz", base.source.clock_rate)))
    det = base.detector
    detector = nested("detector", lambda: DetectorModel(
        efficiency=get("detector", "efficiency", det.efficiency),
        dead_time=get("detector", "dead_time_us", det.dead_time * PER_US) / PER_US,
        jitter_fwhm=get("detector", "jitter_fwhm_ns", det.jitter_fwhm * PER_NS) / PER_NS,
        blackbody_rate=get("detector", "blackbody_rate_hz", det.blackbody_rate),
        raman_rate_in_window=get("detector", "raman_rate_hz", det.raman_rate_in_window),
        raman_reference_window=get("detector", "raman_reference_window_ns",
                                   det.raman_reference_window * PER_NS) / PER_NS))
    # listed losses override or extend the base ones; 0 dB disables one
    losses = {**base.budget.component_losses, **data.get("link.losses", {})}
    budget = nested("link", lambda: LinkBudget(
        get("link", "fiber_length_km", base.budget.fiber_length),
        get("link", "attenuation_db_per_km", base.budget.attenuation),
        losses, detector.efficiency))
    it = base.interferometer
    interferometer = nested("interferometer", lambda: InterferometerModel(
        visibility=get("interferometer", "visibility", it.visibility),
        protocol_efficiency=get("interferometer", "protocol_efficiency",
                                it.protocol_efficiency),
        bit_delay=get("interferometer", "bit_delay_ns", it.bit_delay * PER_NS) / PER_NS))
    window = get("timing", "window_ns", base.window * PER_NS) / PER_NS
    try:
        sync_mode = SyncMode(sc_sec.get("sync_mode", base.sync_mode.value))
    except ValueError:
        raise ConfigError(f"must be one of {[m.value for m in SyncMode]}",
                          "scenario.sync_mode") from None
    scenario = nested("timing", lambda: Scenario(source, budget, interferometer, detector,
                                                 window, sync_mode))
    sp = SecurityParams()
    params = nested("security", lambda: SecurityParams(
        get("security", "qber_limit", sp.qber_limit),
        get("security", "ec_inefficiency", sp.ec_inefficiency),
        get("security", "target_mu", sp.target_mu)))
    rc = RunControls()
    run = RunControls(
        mode=get("run", "mode", rc.mode),
        n_slots=get("run", "n_slots", rc.n_slots),
        seed=get("run", "seed", rc.seed),
        sample_fraction=get("postproc", "sample_fraction", rc.sample_fraction),
        security_margin=get("postproc", "security_margin_bits", rc.security_margin),
        passes=get("postproc", "passes", rc.passes))
    sweep = None
    if "sweep" in data:
        sw = data["sweep"]
        missing = [k for k in ("variable", "from", "to") if k not in sw]
        if missing:
            raise ConfigError("missing key", f"sweep.{missing[0]}")
        sweep = SweepSpec(sw["variable"], sw["from"], sw["to"], sw.get("points", 21),
                          sw.get("scale", "linear"))
    return ScenarioConfig(scenario, params, run, sweep, name=name, base=base_name)


@dataclass(frozen=True)
class ScenarioConfig:
    """A validated scenario plus security parameters and run controls."""

    scenario: Scenario
    security: SecurityParams = SecurityParams()
    run: RunControls = RunControls()
    sweep: SweepSpec | None = None
    name: str = "electrical_sync_50km"
    base: str = "electrical_sync_50km"

    @classmethod
    def from_string(cls, text):
        cp = _parser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"syntax error: {exc}") from None
        return _build(_read_sections(cp))

    @classmethod
    def from_file(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", str(path)) from None
        return cls.from_string(text)

    @classmethod
    def canonical(cls, name, **run_changes):
        """Configuration of a shipped scenario."""
        text = resources.files("qkdlink").joinpath("scenarios", f"{name}.ini").read_text()
        cfg = cls.from_string(text)
        if run_changes:
            cfg = cfg.replace(run=dataclasses.replace(cfg.run, **run_changes))
        return cfg

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_string(self):
        """Canonical serialisation: every field in a fixed order."""
        sc = self.scenario
        det, bud, it = sc.detector, sc.budget, sc.interferometer
        sections = {
            "scenario": {"base": self.base, "name": self.name, "sync_mode": sc.sync_mode.value},
            "source": {"mean_photon_number": sc.source.mean_photon_number,
                       "clock_rate_hz": sc.source.clock_rate},
            "link": {"fiber_length_km": bud.fiber_length,
                     "attenuation_db_per_km": bud.attenuation},
            "link.losses": {f"{k}_db": v for k, v in sorted(bud.component_losses.items())},
            "detector": {"efficiency": det.efficiency,
                         "dead_time_us": det.dead_time * PER_US,
                         "jitter_fwhm_ns": det.jitter_fwhm * PER_NS,
                         "blackbody_rate_hz": det.blackbody_rate,
                         "raman_rate_hz": det.raman_rate_in_window,
                         "raman_reference_window_ns": det.raman_reference_window * PER_NS},
            "interferometer": {"visibility": it.visibility,
                               "protocol_efficiency": it.protocol_efficiency,
                               "bit_delay_ns": it.bit_delay * PER_NS},
            "timing": {"window_ns": sc.window * PER_NS},
            "security": dataclasses.asdict(self.security),
            "postproc": {"sample_fraction": self.run.sample_fraction,
                         "security_margin_bits": self.run.security_margin,
                         "passes": self.run.passes},
            "run": {"mode": self.run.mode, "n_slots": self.run.n_slots, "seed": self.run.seed},
        }
        if self.sweep is not None:
            sections["sweep"] = {"variable": self.sweep.variable, "from": self.sweep.start,
                                 "to": self.sweep.stop, "points": self.sweep.points,
                                 "scale": self.sweep.scale}
        out = []
        for name, values in sections.items():
            out.append(f"[{name}]")
            out.extend(f"{k} = {_fmt(v)}" for k, v in values.items())
            out.append("")
        return "\n".join(out)

    def save(self, path):
        Path(path).write_text(self.to_string())

    @property
    def digest(self):
        """SHA-256 of the semantic content; the run seed is part of it."""
        return hashlib.sha256(self.to_string().encode()).hexdigest()[:16]


def _fmt(v):
    # 12 significant digits absorb unit-conversion rounding, so a
    # parse/serialise cycle is stable
    if isinstance(v, float):
        return f"{v:.12g}"
    return str(v)


def canonical_config_path(name):
    return resources.files("qkdlink").joinpath("scenarios", f"{name}.ini")


def load_config(spec):
    """Config from a file path or the name of a shipped scenario."""
    if spec in security.CANONICAL:
        return ScenarioConfig.canonical(spec)
    return ScenarioConfig.from_file(spec)


# --- results ----------------------------------------------------------------------

@dataclass
class ResultsTable:
    """Named equal-length columns plus run metadata."""

    columns: dict
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.columns = {k: list(v) for k, v in self.columns.items()}
        lengths = {len(v) for v in self.columns.values()}
        if len(lengths) > 1:
            raise DomainError(f"columns differ in length: {sorted(lengths)}")

    def __len__(self):
        return len(next(iter(self.columns.values()))) if self.columns else 0

    @property
    def names(self):
        return list(self.columns)

    def column(self, name):
        return np.asarray(self.columns[name])

    def rows(self):
        return list(zip(*self.columns.values()))

    def __eq__(self, other):
        if not isinstance(other, ResultsTable):
            return NotImplemented
        if self.names != other.names or self.metadata != other.metadata:
            return False
        return all(_same(a, b) for k in self.names
                   for a, b in zip(self.columns[k], other.columns[k]))


def _same(a, b):
    if isinstance(a, float) and isinstance(b, float) and math.isnan(a) and math.isnan(b):
        return True
    return a == b


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _uncell(s):
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


def _metadata_lines(meta):
    lines = []
    for k, v in meta.items():
        for part in str(v).split("\n"):
            lines.append(f"# {k}: {part}")
    return lines


def to_csv(table):
    """CSV text: ``#`` metadata lines, a header row, then data (LF endings)."""
    buf = io.StringIO()
    for line in _metadata_lines(table.metadata):
        buf.write(line + "\n")
    w = csv.writer(buf, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
    w.writerow(table.names)
    for row in table.rows():
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def from_csv(text):
    meta, body = {}, []
    for line in text.split("\n"):
        if line.startswith("# ") and not body:
            key, _, value = line[2:].partition(": ")
            meta[key] = f"{meta[key]}\n{value}" if key in meta else value
        elif line:
            body.append(line)
    reader = csv.reader(io.StringIO("\n".join(body)))
    try:
        header = next(reader)
    except StopIteration:
        raise ConfigError("CSV has no header row") from None
    cols = {h: [] for h in header}
    for row in reader:
        if len(row) != len(header):
            raise ConfigError(f"row has {len(row)} fields, header has {len(header)}")
        for h, v in zip(header, row):
            cols[h].append(_uncell(v))
    return ResultsTable(cols, meta)


def to_dat(table):
    """gnuplot-friendly text: commented header, whitespace-separated columns."""
    lines = _metadata_lines(table.metadata)
    lines.append("# " + " ".join(table.names))
    lines.extend(" ".join(_cell(v) for v in row) for row in table.rows())
    return "\n".join(lines) + "\n"


def report(table, path, dat=False):
    """Write ``path`` as CSV and optionally a sibling ``.dat``; returns the paths."""
    path = Path(path)
    path.write_text(to_csv(table), newline="")
    out = [path]
    if dat:
        dat_path = path.with_suffix(".dat")
        dat_path.write_text(to_dat(table), newline="")
        out.append(dat_path)
    return out


# --- runs -------------------------------------------------------------------------

def point_seed(seed, index):
    """Independent 64-bit seed for sweep point ``index``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, np.uint64)[0])


def _analytic_row(scenario, params):
    a = simulate.analytic_point(scenario, params)
    return {"detection_rate_hz": a["detection_rate"], "sifted_rate_hz": a["sifted_rate"],
            "qber": a["qber"], "secret_rate_hz": a["secret_rate"]}


def _mc_row(scenario, run, seed):
    r = simulate.run_session(scenario, run.n_slots, seed, sample_fraction=run.sample_fraction,
                             margin=run.security_margin, n_passes=run.passes)
    return {"mc_detections": r.n_detections, "mc_sifted_bits": r.n_sifted,
            "mc_detection_rate_hz": r.detection_rate, "mc_sifted_rate_hz": r.sifted_rate,
            "mc_qber": r.qber, "mc_leakage_bits": r.leakage,
            "mc_keys_identical": r.keys_identical, "mc_final_key_bits": r.pa_length,
            "mc_secret_rate_hz": r.secret_rate}


def _discrepancy(an, mc, duration):
    """(MC - analytic) in units of the expected Poisson/binomial spread."""
    out = {}
    n_exp = an["sifted_rate_hz"] * duration
    out["discrepancy_sifted_sigma"] = ((mc["mc_sifted_bits"] - n_exp) / math.sqrt(n_exp)
                                       if n_exp > 0 else math.nan)
    n = mc["mc_sifted_bits"]
    e = an["qber"]
    sd = math.sqrt(e * (1 - e) / n) if n and 0 < e < 1 else math.nan
    out["discrepancy_qber_sigma"] = (mc["mc_qber"] - e) / sd if sd == sd and sd > 0 else math.nan
    return out


def _evaluate_point(args):
    scenario, params, run, seed = args
    row = {}
    an = None
    if run.mode in ("analytic", "both"):
        an = _analytic_row(scenario, params)
        row.update(an)
    if run.mode in ("montecarlo", "both"):
        mc = _mc_row(scenario, run, seed)
        row.update(mc)
        if an is not None:
            row.update(_discrepancy(an, mc, run.n_slots * scenario.source.period))
    return row


def metadata(config):
    return {
        "config_digest": config.digest,
        "seed": config.run.seed,
        "mode": config.run.mode,
        "code_version": __version__,
        "config": config.to_string().rstrip("\n"),
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }


def run(config, workers=1):
    """Evaluate every sweep point (or the single configured point).

    Monte Carlo points use seeds derived from the run seed and the point
    index, so the table does not depend on ``workers``.
    """
    if config.sweep is None:
        values, column = [None], None
    else:
        values, column = config.sweep.values(), config.sweep.column
    jobs = []
    for i, v in enumerate(values):
        sc = config.scenario if v is None else config.sweep.apply(config.scenario, v)
        jobs.append((sc, config.security, config.run, point_seed(config.run.seed, i)))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_evaluate_point, jobs))
    else:
        rows = [_evaluate_point(j) for j in jobs]
    cols = {}
    if column is not None:
        cols[column] = [float(v) for v in values]
    for key in rows[0]:
        cols[key] = [r[key] for r in rows]
    return ResultsTable(cols, metadata(config))


# --- calibration ------------------------------------------------------------------

def _get_receiver(cfg):
    return cfg.scenario.budget.component_losses.get("receiver", 0.0)


def _set_receiver(cfg, v):
    return cfg.replace(scenario=cfg.scenario.replace(
        budget=cfg.scenario.budget.with_component("receiver", v)))


def _get_attenuation(cfg):
    return cfg.scenario.budget.attenuation


def _set_attenuation(cfg, v):
    b = cfg.scenario.budget
    return cfg.replace(scenario=cfg.scenario.replace(
        budget=LinkBudget(b.fiber_length, v, b.component_losses, b.detector_efficiency)))


def _get_blackbody(cfg):
    return cfg.scenario.detector.blackbody_rate


def _set_blackbody(cfg, v):
    return cfg.replace(scenario=cfg.scenario.with_detector(blackbody_rate=v))


FIT_PARAMETERS = {
    "attenuation_db_per_km": (_get_attenuation, _set_attenuation),
    "receiver_loss_db": (_get_receiver, _set_receiver),
    "blackbody_rate_hz": (_get_blackbody, _set_blackbody),
}
DEFAULT_FIT = ("receiver_loss_db", "blackbody_rate_hz")
OBSERVABLES = ("min_mu", "max_distance_km", "qber", "sifted_rate_hz")
MAX_RESIDUAL = 0.20


@dataclass(frozen=True)
class Target:
    config: ScenarioConfig
    observable: str
    value: float
    label: str = ""

    def __post_init__(self):
        if self.observable not in OBSERVABLES:
            raise ConfigError(f"must be one of {OBSERVABLES}", f"{self.label}.observable")
        if not self.value > 0:
            raise ConfigError("must be > 0", f"{self.label}.value")


def observe(config, observable):
    sc, params = config.scenario, config.security
    if observable == "min_mu":
        return security.min_mu(sc, params, rtol=1e-10)
    if observable == "max_distance_km":
        return security.max_distance(sc, params, tol=1e-6)
    if observable == "qber":
        return security.scenario_qber(sc)
    return security.sifted_rate(sc)


@dataclass
class CalibrationResult:
    parameters: dict
    residuals: list
    targets: list
    converged: bool
    n_evaluations: int

    def apply(self, config):
        for name, value in self.parameters.items():
            config = FIT_PARAMETERS[name][1](config, value)
        return config

    def summary(self):
        lines = [f"{k} = {v:.6g}" for k, v in self.parameters.items()]
        for t, r in zip(self.targets, self.residuals):
            model = t.value * (1 + r)
            lines.append(f"{t.label or t.config.name}: {t.observable} target {t.value:.4g} "
                         f"model {model:.4g} residual {100 * r:+.3f}%")
        return "\n".join(lines)


def calibrate(targets, parameters=DEFAULT_FIT, max_residual=MAX_RESIDUAL):
    """Fit shared link parameters so each target's observable matches.

    Residuals are relative errors ``model / target - 1``, minimised in log
    form.  Raises :class:`CalibrationError` when there are fewer targets
    than parameters, when the fit fails, or when any residual exceeds
    ``max_residual``.
    """
    targets = list(targets)
    parameters = tuple(parameters)
    for p in parameters:
        if p not in FIT_PARAMETERS:
            raise ConfigError(f"unknown fit parameter {p!r}; choose from {sorted(FIT_PARAMETERS)}")
    if len(targets) < len(parameters):
        raise CalibrationError(
            f"underdetermined: {len(targets)} target(s) for {len(parameters)} parameters")
    x0 = np.array([max(FIT_PARAMETERS[p][0](targets[0].config), 1e-3) for p in parameters])
    BIG = 10.0

    def residuals(logx):
        x = np.exp(logx)
        out = []
        for t in targets:
            cfg = t.config
            for p, v in zip(parameters, x):
                cfg = FIT_PARAMETERS[p][1](cfg, float(v))
            try:
                out.append(math.log(observe(cfg, t.observable) / t.value))
            except (ThresholdError, DomainError):
                out.append(BIG)
        return np.array(out)

    sol = optimize.least_squares(residuals, np.log(x0), method="trf", x_scale=1.0,
                                 diff_step=1e-6, xtol=1e-12, ftol=1e-12, gtol=1e-12,
                                 max_nfev=200)
    rel = [math.expm1(r) for r in residuals(sol.x)]
    result = CalibrationResult(dict(zip(parameters, map(float, np.exp(sol.x)))), rel,
                               targets, bool(sol.success), int(sol.nfev))
    if not sol.success:
        raise CalibrationError(f"fit did not converge: {sol.message}", rel)
    worst = max(abs(r) for r in rel)
    if worst > max_residual:
        raise CalibrationError(
            f"residual {100 * worst:.1f}% exceeds {100 * max_residual:.0f}%; targets are "
            f"inconsistent with the model\n{result.summary()}", rel)
    return result


def load_targets(path):
    """Targets file: one ``[target.<label>]`` section per target plus ``[fit]``.

    Each target names a ``scenario`` (shipped name or config path relative
    to the targets file), an ``observable`` and a ``value``.
    """
    cp = _parser()
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read targets: {exc}", str(path)) from None
    except configparser.Error as exc:
        raise ConfigError(f"syntax error: {exc}") from None
    here = Path(path).parent
    targets, parameters = [], DEFAULT_FIT
    for section in cp.sections():
        if section == "fit":
            for key in cp[section]:
                if key != "parameters":
                    raise ConfigError("unknown key", f"fit.{key}")
            parameters = tuple(p.strip() for p in cp[section]["parameters"].split(",")
                               if p.strip())
            continue
        if not section.startswith("target."):
            raise ConfigError("unknown section", section)
        sec = cp[section]
        for key in sec:
            if key not in ("scenario", "observable", "value"):
                raise ConfigError("unknown key", f"{section}.{key}")
        for key in ("scenario", "observable", "value"):
            if key not in sec:
                raise ConfigError("missing key", f"{section}.{key}")
        spec = sec["scenario"]
        cfg = load_config(spec if spec in security.CANONICAL else str(here / spec))
        value = _parse_value(f"{section}.value", float, sec["value"])
        targets.append(Target(cfg, sec["observable"], value, section))
    return targets, parameters
