"""Command line front end. Exit status: 0 success, 1 stage failure, 2 configuration error."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import clustering, forest, pipeline, synth
from .env import EnvConfig, StartSampler, start_index
from .geo import GeoPosition, read_trajectories_csv, write_trajectories_csv
from .imitation import GailConfig, train_bc, train_gail, write_diagnostics
from .metrics import evaluate, write_records_csv, write_summary_csv
from .nn import LOG_STD, load_model, save_model
from .pipeline import ConfigError, PipelineConfig, StageError
from .preprocess import ARRIVAL_FEATURES, R_NEAR, V_MAX, ArrivalConditionsTable, WeatherGrid, fit_normalization

log = logging.getLogger("trajpredict")


def _geo(values) -> GeoPosition:
    return GeoPosition(*map(float, values))


def _with_arrivals(trajs, table: ArrivalConditionsTable, airport: str):
    out = []
    for t in trajs:
        t_arr = int(t.times[-1])
        out.append(t.replace(meta={**t.meta, "arrival": tuple(table.lookup(airport, t_arr)), "arrival_time": t_arr}))
    return out


def _select(trajs, clusters: str | None, cluster: int | None):
    if clusters is None:
        return trajs
    model = clustering.ClusterModel.from_json(Path(clusters).read_text())
    keep = set(model.members(cluster)) if cluster is not None else None
    return [t for t in trajs if keep is None or t.id in keep]


# --- subcommands -----------------------------------------------------------------------


def cmd_synth(a) -> int:
    spec = synth.ScenarioSpec.load(a.spec) if a.spec else synth.ScenarioSpec()
    if a.seed is not None:
        spec.seed = a.seed
    paths = pipeline.write_scenario(synth.generate(spec, raw=True), Path(a.out))
    print(yaml.safe_dump(paths, sort_keys=True), end="")
    return 0


def cmd_preprocess(a) -> int:
    raw = read_trajectories_csv(a.trajectories)
    grid = WeatherGrid.load(a.grid)
    arrivals = ArrivalConditionsTable.load(a.arrivals)
    kept, rejected = pipeline.preprocess_corpus(raw, grid, arrivals, _geo(a.origin), _geo(a.dest), a.dt,
                                                a.r_near, a.v_max, a.airport)
    write_trajectories_csv(a.out, kept)
    for t, reason in rejected:
        print(f"rejected {t.id}: {reason}", file=sys.stderr)
    print(f"kept {len(kept)} rejected {len(rejected)}")
    return 0


def cmd_cluster(a) -> int:
    trajs = read_trajectories_csv(a.trajectories)
    D = clustering.distance_matrix(trajs)
    model = clustering.select_k(D, (a.k_min, a.k_max))
    Path(a.out).write_text(model.to_json())
    print(f"k={model.k} silhouette={model.silhouettes[model.k]:.4f}")
    return 0


def cmd_train_classifier(a) -> int:
    trajs = _with_arrivals(read_trajectories_csv(a.trajectories), ArrivalConditionsTable.load(a.arrivals),
                           a.airport)
    model = clustering.ClusterModel.from_json(Path(a.clusters).read_text())
    y = model.label_array([t.id for t in trajs])
    X = np.array([pipeline.classifier_row(t.meta["arrival"], t.meta["arrival_time"]) for t in trajs])
    params = forest.ForestParams(n_trees=a.trees, max_depth=a.max_depth)
    if a.cv:
        grid = {"n_trees": [10, 20, 50], "max_depth": [5, 10, 20]}
        params, table = forest.cross_validate(X, y, grid, folds=5, seed=a.seed)
        for p, acc in table:
            print(f"{p} cv_accuracy={acc:.4f}")
    fmodel = forest.train_forest(X, y, params, seed=a.seed, feature_names=pipeline.CLASSIFIER_FEATURES)
    Path(a.out).write_text(fmodel.to_json())
    print(f"oob_accuracy={fmodel.oob_accuracy}")
    return 0


def _demos(a):
    trajs = _select(read_trajectories_csv(a.trajectories), a.clusters, a.cluster)
    if not trajs:
        raise ConfigError("no training trajectories selected")
    ctx = None
    if a.arrival_context:
        trajs = _with_arrivals(trajs, ArrivalConditionsTable.load(a.arrivals), a.airport)
        ctx = np.array([t.meta["arrival"] for t in trajs])
    return trajs, ctx


def cmd_train_bc(a) -> int:
    trajs, ctx = _demos(a)
    names = pipeline.STATE_NAMES + (ARRIVAL_FEATURES if ctx is not None else ())
    rows, acts = pipeline.expert_pairs(trajs, ctx)
    s_stats = fit_normalization(np.vstack(rows), names)
    a_stats = fit_normalization(np.vstack(acts), pipeline.ACTION_NAMES)
    res = train_bc(np.vstack([r[:-1] for r in rows]), np.vstack(acts), s_stats, a_stats,
                   epochs=a.epochs, folds=a.folds, seed=a.seed)
    res.policy.log_std = np.full(3, a.log_std)
    save_model(res.policy, a.out)
    print(f"best fold {res.best_fold} validation mse {res.fold_mse[res.best_fold]:.6f}")
    return 0


def cmd_train_gail(a) -> int:
    trajs, ctx = _demos(a)
    policy = load_model(a.policy)
    rows, acts = pipeline.expert_pairs(trajs, ctx)
    env = EnvConfig(_geo(a.dest), WeatherGrid.load(a.grid), a.dt, a.dest_radius, a.max_len)
    cfg = GailConfig(iterations=a.iterations, batch_samples=a.batch_samples, disc_epochs=a.disc_epochs)
    diag = []
    try:
        res = train_gail(np.vstack([r[:-1] for r in rows]), np.vstack(acts), env, StartSampler(trajs, ctx), cfg,
                         policy, seed=a.seed, callback=diag.append)
    finally:
        if a.diagnostics:
            write_diagnostics(diag, a.diagnostics)
    save_model(res.policy, a.out)
    return 0


def cmd_evaluate(a) -> int:
    preds = {t.id: t for t in read_trajectories_csv(a.pred)}
    actual = {t.id: t for t in read_trajectories_csv(a.actual)}
    ref = _geo(a.ref)
    recs = []
    for pid, p in preds.items():
        aid = pid[: -len(a.suffix)] if a.suffix and pid.endswith(a.suffix) else pid
        if aid not in actual:
            raise ConfigError(f"no actual trajectory for prediction {pid}")
        recs.append(evaluate(p, actual[aid], ref, a.dt, traj_id=aid))
    write_records_csv(recs, a.out)
    if a.summary:
        write_summary_csv(pipeline.summarize(recs), a.summary)
    return 0


def cmd_predict(a) -> int:
    if a.run_dir:
        pred = pipeline.load_predictor(a.run_dir, a.setting)
    else:
        if a.mean_duration is None or a.dest is None or not (a.grid and a.arrivals):
            raise ConfigError("without --run-dir, --policy, --grid, --arrivals, --dest and --mean-duration are needed")
        fmodel = forest.ForestModel.from_json(Path(a.forest).read_text()) if a.forest else None
        env = EnvConfig(_geo(a.dest), WeatherGrid.load(a.grid), a.dt, a.dest_radius, a.max_len)
        pred = pipeline.Predictor(a.setting, pipeline.policies_from_files(a.policy), env,
                                  ArrivalConditionsTable.load(a.arrivals), a.mean_duration, a.airport, fmodel)
    trajs = read_trajectories_csv(a.trajectories)
    if a.traj_id:
        trajs = [t for t in trajs if t.id == a.traj_id]
        if not trajs:
            raise ConfigError(f"trajectory {a.traj_id} not in {a.trajectories}")
    jobs = [(t, start_index(t, a.m), [a.seed, k]) for k, t in enumerate(trajs)]
    eps = pred.rollout(jobs, 0.0 if a.mean else 1.0)
    out = [pipeline.episode_trajectory(e, t, f"{t.id}_pred") for e, t in zip(eps, trajs)]
    write_trajectories_csv(a.out, out)
    for t, e in zip(trajs, eps):
        print(f"{t.id}: {len(e)} steps, {e.reason}")
    return 0


def _override(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, value = item.split("=", 1)
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = yaml.safe_load(value)


def cmd_pipeline(a) -> int:
    doc = PipelineConfig.load(a.config).to_dict() if a.config else PipelineConfig().to_dict()
    for item in a.set or []:
        _override(doc, item)
    if a.out_dir:
        doc["out_dir"] = a.out_dir
    cfg = PipelineConfig.from_dict(doc)
    res = pipeline.run_pipeline(cfg)
    print(f"run directory: {res.out_dir}")
    return 0


# --- argument parsing ---------------------------------------------------------------------


def _env_flags(p, need_dest=True):
    p.add_argument("--grid", required=need_dest)
    p.add_argument("--dest", nargs=3, type=float, metavar=("LON", "LAT", "ALT"), required=need_dest)
    p.add_argument("--dt", type=int, default=5)
    p.add_argument("--dest-radius", type=float, default=5000.0)
    p.add_argument("--max-len", type=int, default=1000)


def _demo_flags(p):
    p.add_argument("--trajectories", required=True, help="preprocessed trajectory CSV")
    p.add_argument("--clusters", help="cluster model JSON; restricts to --cluster")
    p.add_argument("--cluster", type=int)
    p.add_argument("--arrival-context", action="store_true", help="append arrival conditions (OnePolicy)")
    p.add_argument("--arrivals")
    p.add_argument("--airport", default=synth.DEST_AIRPORT)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="trajpredict", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scenario")
    p.add_argument("--spec", help="scenario YAML")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="resample, clean and enrich raw tracks")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--grid", required=True)
    p.add_argument("--arrivals", required=True)
    p.add_argument("--origin", nargs=3, type=float, required=True)
    p.add_argument("--dest", nargs=3, type=float, required=True)
    p.add_argument("--dt", type=int, default=5)
    p.add_argument("--r-near", type=float, default=R_NEAR)
    p.add_argument("--v-max", type=float, default=V_MAX)
    p.add_argument("--airport", default=synth.DEST_AIRPORT)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("cluster", help="nDTW + Ward clustering with silhouette model selection")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--k-min", type=int, default=2)
    p.add_argument("--k-max", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("train-classifier", help="random forest from arrival conditions to cluster")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--clusters", required=True)
    p.add_argument("--arrivals", required=True)
    p.add_argument("--airport", default=synth.DEST_AIRPORT)
    p.add_argument("--trees", type=int, default=20)
    p.add_argument("--max-depth", type=int, default=20)
    p.add_argument("--cv", action="store_true", help="5-fold grid search before the final fit")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("train-bc", help="behavioural cloning")
    _demo_flags(p)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--log-std", type=float, default=LOG_STD)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_bc)

    p = sub.add_parser("train-gail", help="adversarial imitation from a cloned policy")
    _demo_flags(p)
    _env_flags(p)
    p.add_argument("--policy", required=True, help="initial policy JSON")
    p.add_argument("--iterations", type=int, default=1500)
    p.add_argument("--batch-samples", type=int, default=50000)
    p.add_argument("--disc-epochs", type=int, default=100)
    p.add_argument("--diagnostics", help="per-iteration CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_gail)

    p = sub.add_parser("evaluate", help="metrics of predicted against actual trajectories")
    p.add_argument("--pred", required=True)
    p.add_argument("--actual", required=True)
    p.add_argument("--ref", nargs=3, type=float, required=True, help="ENU reference (destination)")
    p.add_argument("--dt", type=int, default=5)
    p.add_argument("--suffix", default="_pred", help="stripped from predicted ids to find the actual one")
    p.add_argument("--out", required=True)
    p.add_argument("--summary")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="roll out a trained policy from a test trajectory")
    p.add_argument("--run-dir", help="finished pipeline run; replaces the model flags")
    p.add_argument("--setting", choices=pipeline.SETTINGS, default=pipeline.MULT)
    p.add_argument("--policy", nargs="+", default=[], help="policy files ordered by cluster id")
    p.add_argument("--forest")
    p.add_argument("--arrivals")
    p.add_argument("--airport", default=synth.DEST_AIRPORT)
    p.add_argument("--mean-duration", type=float)
    _env_flags(p, need_dest=False)
    p.add_argument("--trajectories", required=True)
    p.add_argument("--traj-id")
    p.add_argument("--m", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mean", action="store_true", help="deterministic rollout of the policy mean")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("pipeline", help="full experiment")
    p.add_argument("--config", help="pipeline YAML")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_pipeline)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    a = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return a.func(a)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except StageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, RuntimeError) as err:
        print(f"error in {a.command}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
