"""End-to-end experiment: data, clustering, classifier, per-cluster imitation, evaluation.

Two settings are supported. ``MultPolicies`` trains one policy per trajectory
cluster and picks the policy for a test flight with the random forest;
``OnePolicy`` trains a single policy whose input also carries the five
arrival-condition variables.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import clustering, forest, synth
from .env import REFERENCE_BBOX, EnvConfig, PolicyActor, StartSampler, episode_rng, run_episodes, start_index, state_rows
from .geo import GeoPosition, Trajectory, read_trajectories_csv, write_trajectories_csv
from .imitation import GailConfig, train_bc, train_gail, write_diagnostics
from .metrics import aggregate, evaluate, write_records_csv, write_summary_csv
from .nn import LOG_STD, GaussianPolicy, load_model, save_model
from .preprocess import (
    ARRIVAL_FEATURES,
    R_NEAR,
    V_MAX,
    WEATHER_FEATURES,
    ArrivalConditionsTable,
    WeatherGrid,
    action_array,
    clean,
    enrich,
    fit_normalization,
    resample,
)

log = logging.getLogger(__name__)

MULT = "MultPolicies"
ONE = "OnePolicy"
SETTINGS = (MULT, ONE)
STATE_NAMES = ("lon", "lat", "alt", "t") + WEATHER_FEATURES
ACTION_NAMES = ("dlon", "dlat", "dalt")
DAY = 86400


class ConfigError(ValueError):
    """Invalid or inconsistent configuration (exit status 2)."""


class StageError(RuntimeError):
    """A pipeline stage failed (exit status 1)."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass
class PipelineConfig:
    out_dir: str = "runs/default"
    seed: int = 0
    settings: list = field(default_factory=lambda: list(SETTINGS))
    # data: a synthetic scenario unless trajectory/grid/arrival files are given
    scenario: dict = field(default_factory=dict)
    trajectories: str | None = None
    weather_grid: str | None = None
    arrivals: str | None = None
    modes: str | None = None
    origin: list | None = None
    dest: list | None = None
    airport: str = synth.DEST_AIRPORT
    dt: int = 5
    r_near: float = R_NEAR
    v_max: float = V_MAX
    n_test: int = 10
    # clustering and classification
    k_range: list = field(default_factory=lambda: [2, 6])
    forest: dict = field(default_factory=dict)
    # imitation
    bc_epochs: int = 100
    bc_folds: int = 10
    bc_lr: float = 1e-3
    log_std: float = LOG_STD
    gail: dict = field(default_factory=dict)
    dest_radius: float = 5000.0
    max_len: int = 1000
    bbox: list = field(default_factory=lambda: [list(c) for c in REFERENCE_BBOX])
    # evaluation
    m_values: list = field(default_factory=lambda: [0.0, 0.2, 0.5, 0.7])
    repetitions: int = 20
    rollout: str = "stochastic"

    def validate(self) -> "PipelineConfig":
        if not self.settings or any(s not in SETTINGS for s in self.settings):
            raise ConfigError(f"settings must be a non-empty subset of {SETTINGS}")
        if any(not 0.0 <= float(m) < 1.0 for m in self.m_values) or not self.m_values:
            raise ConfigError("every M value must lie in [0, 1)")
        if self.rollout not in ("stochastic", "mean"):
            raise ConfigError("rollout must be 'stochastic' or 'mean'")
        if self.repetitions < 1 or self.n_test < 1 or self.dt <= 0:
            raise ConfigError("repetitions, n_test and dt must be positive")
        lo, hi = self.k_range
        if not 2 <= lo <= hi:
            raise ConfigError("k_range must satisfy 2 <= low <= high")
        files = (self.trajectories, self.weather_grid, self.arrivals)
        if any(files) and not all(files):
            raise ConfigError("trajectories, weather_grid and arrivals must be given together")
        if self.trajectories:
            if self.origin is None or self.dest is None:
                raise ConfigError("origin and dest are required with external data")
            for p in files + ((self.modes,) if self.modes else ()):
                if not Path(p).exists():
                    raise ConfigError(f"missing input file {p}")
        try:
            self.gail_config()
            self.forest_params()
            synth.ScenarioSpec.from_dict(self.scenario)
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from None
        return self

    def gail_config(self) -> GailConfig:
        return GailConfig(**self.gail)

    def forest_params(self) -> forest.ForestParams:
        return forest.ForestParams(**self.forest)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown configuration keys: {sorted(extra)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a mapping")
        return cls.from_dict(doc)

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


# --- data ------------------------------------------------------------------------------


@dataclass
class Dataset:
    train: list
    test: list
    grid: WeatherGrid
    arrivals: ArrivalConditionsTable
    origin: GeoPosition
    dest: GeoPosition
    rejected: list = field(default_factory=list)


def read_modes(path) -> dict:
    with open(path, newline="") as fh:
        return {row["traj_id"]: int(row["mode"]) for row in csv.DictReader(fh)}


def write_modes(path, trajectories) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["traj_id", "mode"])
        for t in trajectories:
            w.writerow([t.id, t.meta["mode"]])


def write_scenario(scenario: synth.Scenario, out: Path) -> dict:
    """Write raw tracks, weather grid, arrival table and true modes; return their paths."""
    out.mkdir(parents=True, exist_ok=True)
    paths = {"trajectories": out / "raw_trajectories.csv", "weather_grid": out / "weather_grid.csv",
             "arrivals": out / "arrivals.csv", "modes": out / "modes.csv"}
    write_trajectories_csv(paths["trajectories"], scenario.trajectories)
    scenario.grid.save(paths["weather_grid"])
    scenario.arrivals.save(paths["arrivals"])
    write_modes(paths["modes"], scenario.trajectories)
    scenario.spec.save(out / "scenario.yaml")
    return {k: str(v) for k, v in paths.items()}


def preprocess_corpus(raw, grid, arrivals, origin, dest, dt, r_near, v_max, airport, modes=None):
    """Resample, clean and enrich. Returns (kept, rejected)."""
    resampled = [resample(t, dt).replace(origin=origin, destination=dest) for t in raw]
    kept, rejected = clean(resampled, origin, dest, r_near, v_max)
    out = []
    for t in kept:
        t = enrich(t, grid, arrivals, airport)
        if modes is not None and t.id in modes:
            t = t.replace(meta={**t.meta, "mode": modes[t.id]})
        out.append(t)
    return out, rejected


def load_dataset(cfg: PipelineConfig, data_dir: Path) -> Dataset:
    if cfg.trajectories:
        paths = {"trajectories": cfg.trajectories, "weather_grid": cfg.weather_grid,
                 "arrivals": cfg.arrivals, "modes": cfg.modes}
        origin, dest = GeoPosition(*cfg.origin), GeoPosition(*cfg.dest)
    else:
        spec = synth.ScenarioSpec.from_dict({**cfg.scenario, "dt": cfg.dt})
        paths = write_scenario(synth.generate(spec, raw=True), data_dir)
        origin, dest = spec.origin_pos, spec.dest_pos
    raw = read_trajectories_csv(paths["trajectories"])
    grid = WeatherGrid.load(paths["weather_grid"])
    arrivals = ArrivalConditionsTable.load(paths["arrivals"])
    modes = read_modes(paths["modes"]) if paths.get("modes") else None
    kept, rejected = preprocess_corpus(raw, grid, arrivals, origin, dest, cfg.dt, cfg.r_near, cfg.v_max,
                                       cfg.airport, modes)
    labels = [t.meta.get("mode", 0) for t in kept]
    train, test = synth.split(kept, n_test=cfg.n_test, seed=cfg.seed, labels=labels)
    return Dataset(train, test, grid, arrivals, origin, dest, rejected)


# --- features ---------------------------------------------------------------------------


def time_of_day_hours(t) -> float:
    return float(int(t) % DAY) / 3600.0


def classifier_row(arrival_values, t_arrival) -> np.ndarray:
    return np.append(np.asarray(arrival_values, dtype=float), time_of_day_hours(t_arrival))


CLASSIFIER_FEATURES = ARRIVAL_FEATURES + ("arrival_hour",)


def forecast_arrival(traj: Trajectory, arrivals: ArrivalConditionsTable, mean_duration: float, airport: str):
    """(estimated arrival time, forecast arrival conditions) for a flight's departure."""
    t_f = int(traj.times[0]) + int(round(mean_duration))
    return t_f, arrivals.lookup(airport, t_f)


def expert_pairs(trajs, context=None):
    """Stacked raw state rows (all states) and the actions taken from each non-final state."""
    rows, acts = [], []
    for k, t in enumerate(trajs):
        ctx = None if context is None else context[k]
        rows.append(state_rows(t.positions, t.times, t.features[:, : len(WEATHER_FEATURES)], ctx))
        acts.append(action_array(t))
    return rows, acts


def _stats(names, rows):
    return fit_normalization(np.vstack(rows), names)


# --- training ---------------------------------------------------------------------------


@dataclass
class PolicySlot:
    name: str
    trajectories: list
    context: np.ndarray | None = None


def train_slot(cfg: PipelineConfig, slot: PolicySlot, env: EnvConfig, out: Path, seed) -> dict:
    """Behaviour cloning then adversarial imitation for one policy; writes its artifacts."""
    state_names = STATE_NAMES + (ARRIVAL_FEATURES if slot.context is not None else ())
    rows, acts = expert_pairs(slot.trajectories, slot.context)
    s_stats = _stats(state_names, rows)
    a_stats = _stats(ACTION_NAMES, acts)
    states = np.vstack([r[:-1] for r in rows])
    actions = np.vstack(acts)
    bc = train_bc(states, actions, s_stats, a_stats, epochs=cfg.bc_epochs, folds=cfg.bc_folds,
                  seed=seed, lr=cfg.bc_lr)
    bc.policy.log_std = np.full(3, cfg.log_std)
    files = {"bc": str(out / f"{slot.name}_bc.json"), "policy": str(out / f"{slot.name}.json"),
             "value": str(out / f"{slot.name}_value.json"),
             "discriminator": str(out / f"{slot.name}_discriminator.json"),
             "diagnostics": str(out / f"{slot.name}_diagnostics.csv")}
    save_model(bc.policy, files["bc"])
    sampler = StartSampler(slot.trajectories, slot.context)
    rows_seen = []
    try:
        res = train_gail(states, actions, env, sampler, cfg.gail_config(), bc.policy, seed=seed,
                         callback=rows_seen.append)
    finally:
        write_diagnostics(rows_seen, files["diagnostics"])
    save_model(res.policy, files["policy"])
    save_model(res.value, files["value"])
    save_model(res.discriminator, files["discriminator"])
    return files


def make_env(cfg: PipelineConfig, dest: GeoPosition, grid: WeatherGrid) -> EnvConfig:
    return EnvConfig(dest, grid, cfg.dt, cfg.dest_radius, cfg.max_len, tuple(tuple(c) for c in cfg.bbox))


# --- prediction ---------------------------------------------------------------------------


@dataclass
class Predictor:
    """Everything needed to roll out predictions for one setting."""

    setting: str
    policies: list
    env: EnvConfig
    arrivals: ArrivalConditionsTable
    mean_duration: float
    airport: str
    forest: forest.ForestModel | None = None

    def __post_init__(self):
        for p in self.policies:
            names = p.state_stats.names
            want = STATE_NAMES + (ARRIVAL_FEATURES if self.setting == ONE else ())
            if tuple(names) != want:
                raise ValueError(f"policy input schema {names} does not match the {self.setting} setting")
        if self.setting == MULT and self.forest is None and len(self.policies) > 1:
            raise ValueError("MultPolicies with several policies needs a classifier")
        if self.forest is not None and tuple(self.forest.feature_names) != CLASSIFIER_FEATURES:
            raise ValueError("classifier feature schema mismatch")

    def choose(self, traj: Trajectory):
        """(policy index, context vector or None) for a test flight."""
        t_f, forecast = forecast_arrival(traj, self.arrivals, self.mean_duration, self.airport)
        if self.setting == ONE:
            return 0, forecast
        if self.forest is None:
            return 0, None
        cls, _ = forest.predict_class(self.forest, classifier_row(forecast, t_f))
        if cls >= len(self.policies):
            raise ValueError(f"classifier predicted cluster {cls} with only {len(self.policies)} policies")
        return cls, None

    def rollout(self, jobs, noise_scale: float):
        """``jobs``: list of (traj, start index, noise seed key). Returns episodes in job order."""
        out = [None] * len(jobs)
        by_policy: dict[int, list] = {}
        for j, (traj, start, key) in enumerate(jobs):
            pi, ctx = self.choose(traj)
            by_policy.setdefault(pi, []).append((j, traj.state(start), ctx, key))
        for pi, items in sorted(by_policy.items()):
            noises = np.array([episode_rng(key, 0).standard_normal((self.env.max_len, 3)) for *_, key in items])
            ctxs = None if items[0][2] is None else [c for _, _, c, _ in items]
            eps = run_episodes(PolicyActor(self.policies[pi], noise_scale), self.env,
                               [s for _, s, _, _ in items], noises, ctxs)
            for (j, *_), e in zip(items, eps):
                out[j] = e
        return out


def episode_trajectory(ep, ref: Trajectory, ident: str) -> Trajectory:
    return Trajectory(ident, ep.times, ep.positions, ep.states[:, 4: 4 + len(WEATHER_FEATURES)],
                      WEATHER_FEATURES, ref.origin, ref.destination)


def evaluation_rollouts(pred: Predictor, test, m_values, repetitions, seed, rollout):
    """Yield (M, repetition, test index, episode, predicted track, actual track) in record order.

    Noise for repetition ``r`` of test flight ``k`` at the ``mi``-th M value is
    keyed by ``(seed, 500, mi, r, k)``, so every setting sees the same draws.
    """
    noise = 0.0 if rollout == "mean" else 1.0
    for mi, m in enumerate(m_values):
        jobs, meta = [], []
        for r in range(repetitions):
            for k, traj in enumerate(test):
                start = start_index(traj, float(m))
                jobs.append((traj, start, [seed, 500, mi, r, k]))
                meta.append((r, k, start))
        eps = pred.rollout(jobs, noise)
        for (r, k, start), e in zip(meta, eps):
            actual = test[k].tail(start)
            yield float(m), r, k, e, episode_trajectory(e, actual, f"{test[k].id}_pred"), actual


def evaluate_setting(pred: Predictor, test, m_values, repetitions, seed, rollout, dt, dest):
    return [evaluate(pt, actual, dest, dt, setting=pred.setting, m=m, seed=int(seed), traj_id=test[k].id,
                     repetition=r, reason=e.reason)
            for m, r, k, e, pt, actual in evaluation_rollouts(pred, test, m_values, repetitions, seed, rollout)]


# --- orchestration --------------------------------------------------------------------------


def _stage(name):
    def wrap(fn):
        def inner(*a, **kw):
            log.info("stage %s", name)
            try:
                return fn(*a, **kw)
            except (ConfigError, StageError):
                raise
            except Exception as err:  # noqa: BLE001 - every failure is reported with its stage
                raise StageError(name, err) from err
        return inner
    return wrap


@dataclass
class RunResult:
    out_dir: Path
    manifest: dict
    records: list


def run_pipeline(cfg: PipelineConfig) -> RunResult:
    cfg.validate()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    manifest: dict = {"settings": {}, "seed": cfg.seed}

    data = _stage("data")(load_dataset)(cfg, out / "data")
    write_trajectories_csv(out / "data" / "train.csv", data.train)
    write_trajectories_csv(out / "data" / "test.csv", data.test)
    manifest["n_train"], manifest["n_test"] = len(data.train), len(data.test)
    manifest["n_rejected"] = len(data.rejected)
    mean_duration = float(np.mean([t.duration for t in data.train]))
    manifest["mean_duration"] = mean_duration
    manifest["dest"] = data.dest.as_array().tolist()
    env = make_env(cfg, data.dest, data.grid)

    records = []
    for setting in cfg.settings:
        sdir = out / setting
        sdir.mkdir(exist_ok=True)
        entry: dict = {"policies": []}
        if setting == MULT:
            model = _stage("cluster")(_cluster)(cfg, data.train, sdir)
            entry["clusters"] = str(sdir / "clusters.json")
            labels = model.label_array([t.id for t in data.train])
            fmodel = _stage("train_classifier")(_classifier)(cfg, data.train, labels, sdir)
            entry["forest"] = str(sdir / "forest.json") if fmodel is not None else None
            slots = [PolicySlot(f"cluster{c}", [t for t, l in zip(data.train, labels) if l == c])
                     for c in range(model.k)]
        else:
            fmodel = None
            ctx = np.array([t.meta["arrival"] for t in data.train])
            slots = [PolicySlot("policy", data.train, ctx)]
        for i, slot in enumerate(slots):
            files = _stage(f"train_gail[{setting}/{slot.name}]")(train_slot)(
                cfg, slot, env, sdir, [cfg.seed, SETTINGS.index(setting), i])
            entry["policies"].append(files)
        pred = Predictor(setting, [load_model(f["policy"]) for f in entry["policies"]], env, data.arrivals,
                         mean_duration, cfg.airport, fmodel)
        recs = _stage(f"evaluate[{setting}]")(evaluate_setting)(
            pred, data.test, cfg.m_values, cfg.repetitions, cfg.seed, cfg.rollout, cfg.dt, data.dest)
        write_records_csv(recs, sdir / "metrics.csv")
        records.extend(recs)
        manifest["settings"][setting] = entry
    write_records_csv(records, out / "metrics.csv")
    write_summary_csv(summarize(records), out / "summary.csv")
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return RunResult(out, manifest, records)


def summarize(records) -> dict:
    groups: dict = {}
    for r in records:
        groups.setdefault((r.setting, r.m), []).append(r)
    return {k: (len(v), aggregate(v)) for k, v in groups.items()}


def _cluster(cfg: PipelineConfig, train, out: Path) -> clustering.ClusterModel:
    D = clustering.distance_matrix(train)
    model = clustering.select_k(D, tuple(cfg.k_range))
    (out / "clusters.json").write_text(model.to_json())
    return model


def _classifier(cfg: PipelineConfig, train, labels, out: Path):
    if len(np.unique(labels)) < 2:
        return None
    X = np.array([classifier_row(t.meta["arrival"], t.meta["arrival_time"]) for t in train])
    model = forest.train_forest(X, labels, cfg.forest_params(), seed=cfg.seed, feature_names=CLASSIFIER_FEATURES)
    (out / "forest.json").write_text(model.to_json())
    return model


def load_predictor(run_dir, setting: str, arrivals=None, grid=None) -> Predictor:
    """Rebuild a Predictor from a finished run directory."""
    run_dir = Path(run_dir)
    cfg = PipelineConfig.load(run_dir / "config.yaml")
    manifest = json.loads((run_dir / "manifest.json").read_text())
    if setting not in manifest["settings"]:
        raise ConfigError(f"run {run_dir} has no {setting} models")
    entry = manifest["settings"][setting]
    grid = grid or WeatherGrid.load(cfg.weather_grid or run_dir / "data" / "weather_grid.csv")
    arrivals = arrivals or ArrivalConditionsTable.load(cfg.arrivals or run_dir / "data" / "arrivals.csv")
    fmodel = None
    if entry.get("forest"):
        fmodel = forest.ForestModel.from_json(Path(entry["forest"]).read_text())
    env = make_env(cfg, GeoPosition(*manifest["dest"]), grid)
    return Predictor(setting, [load_model(f["policy"]) for f in entry["policies"]], env, arrivals,
                     manifest["mean_duration"], cfg.airport, fmodel)


def policies_from_files(paths) -> list[GaussianPolicy]:
    out = []
    for p in paths:
        m = load_model(p)
        if not isinstance(m, GaussianPolicy):
            raise ValueError(f"{p} is not a policy file")
        out.append(m)
    return out

