"""Command-line entry point: ``incrbid <subcommand> [options]``.

Subcommands: simulate, panel, fit, score, report, bid, validate, replicate.
Exit status: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import io
import json
import logging
import os
import platform
import sys
import tempfile
import time
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any

import numpy as np
import scipy

from . import __version__
from .attribution import SliceSpec, campaign_rollup, impression_ledger, report_csv, report_json
from .bidding import BidCounters, BidPolicy, BidPolicyError, compute_bids
from .estimators import (
    DEFAULT_LAMBDA_GRID,
    DIAGONAL_TWO_STEP,
    CoefficientSet,
    bayesian_bootstrap,
    fit_hcc,
    fit_ridge,
    gmm_iv,
    ols,
    weighted_mse,
)
from .estimators.core import WEIGHTINGS
from .events import EventLogError, EventStore, read_events
from .features import FeatureConfigError, feature_config_hash, keys_from_config
from .panel import Panel, PanelConfig, PanelError, build_panel
from .scenarios import SCENARIOS, run_scenario
from .simulator import MarketConfig, MarketConfigError, ground_truth_json, simulate, write_events

log = logging.getLogger("incrbid")

SUBCOMMANDS = ("simulate", "panel", "fit", "score", "report", "bid", "validate", "replicate")
SECTIONS = ("rng_seed", "market", "features", "panel", "estimator", "bidding", "attribution", "io")

DEFAULT_CONFIG: dict[str, Any] = {
    "rng_seed": 0,
    "market": {
        "n_users": 2000,
        "horizon_T": 86400.0,
        "submit_probability_p": 0.5,
        "true_beta": [{"key": {"stock_class": "AdStock", "kernel": {"family": "exponential", "tau": 600.0}},
                       "beta": 0.005}],
    },
    "features": [
        {"stock_class": "Baseline", "characteristic": "intercept"},
        {"stock_class": "GhostBidStock", "kernel": {"family": "exponential", "tau": 600.0}},
        {"stock_class": "AdStock", "kernel": {"family": "exponential", "tau": 600.0}},
        {"stock_class": "PotentialAdStock", "kernel": {"family": "exponential", "tau": 600.0}},
    ],
    "panel": {"ratio_C": 10.0, "add_double_negatives": True, "holdout_fraction": 0.3},
    "estimator": {"method": "hcc", "lambda_grid": list(DEFAULT_LAMBDA_GRID), "hcc_grid": None,
                  "weighting": DIAGONAL_TWO_STEP, "n_draws": 0, "variance_multiplier": 1.0,
                  "hausman_draws": 0},
    "bidding": {"margin_value_mv": 50.0, "submit_probability_p": 0.5, "randomization_level": "BidLevel",
                "two_point_floor": True, "thompson": False, "thompson_unit": "bid"},
    "attribution": {"slices": [{"name": "all", "where": {}}], "as_of": None},
    "io": {},
}

ESTIMATOR_METHODS = ("hcc", "ols", "ridge", "gmm")


class ConfigError(ValueError):
    """Configuration problem; the message starts with the offending field path."""


# ---------------------------------------------------------------------------
# config handling


def _deep_merge(base: dict, extra: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set {assignment!r}: expected section.key=value")
    path, value = assignment.split("=", 1)
    parts = path.strip().split(".")
    if parts[0] not in SECTIONS:
        raise ConfigError(f"{path}: unknown section {parts[0]!r}")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = _parse_value(value)


def load_config(path: str | None, overrides: Sequence[str] = (), seed: int | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"<config>: cannot read {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"<config>: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        if not isinstance(user, Mapping):
            raise ConfigError("<config>: top level must be an object")
        unknown = set(user) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown config section")
        if "features" in user:
            cfg["features"] = []
        cfg = _deep_merge(cfg, user)
    for a in overrides:
        apply_override(cfg, a)
    if seed is not None:
        cfg["rng_seed"] = int(seed)
    if not isinstance(cfg["rng_seed"], int):
        raise ConfigError("rng_seed: must be an integer")
    return cfg


def config_hash(cfg: Mapping) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _section(cfg: Mapping, name: str) -> dict:
    sec = cfg.get(name)
    if not isinstance(sec, Mapping):
        raise ConfigError(f"{name}: must be an object")
    return dict(sec)


def market_config(cfg: Mapping) -> MarketConfig:
    sec = _section(cfg, "market")
    sec.setdefault("rng_seed", cfg["rng_seed"])
    try:
        return MarketConfig.from_dict(sec)
    except (MarketConfigError, FeatureConfigError, TypeError, KeyError) as exc:
        raise ConfigError(f"market: {exc}") from exc


def feature_keys(cfg: Mapping):
    items = cfg.get("features")
    if not isinstance(items, list) or not items:
        raise ConfigError("features: must be a non-empty list")
    for i, d in enumerate(items):
        if not isinstance(d, Mapping):
            raise ConfigError(f"features[{i}]: must be an object")
        try:
            keys_from_config([d])
        except FeatureConfigError as exc:
            raise ConfigError(f"features[{i}]: {exc}") from exc
    try:
        return keys_from_config(items)
    except FeatureConfigError as exc:
        raise ConfigError(f"features: {exc}") from exc


def panel_config(cfg: Mapping) -> PanelConfig:
    sec = _section(cfg, "panel")
    sec.setdefault("rng_seed", cfg["rng_seed"])
    try:
        return PanelConfig(**sec)
    except (PanelError, TypeError) as exc:
        raise ConfigError(f"panel: {exc}") from exc


def estimator_config(cfg: Mapping) -> dict:
    sec = _section(cfg, "estimator")
    known = set(DEFAULT_CONFIG["estimator"])
    for k in sec:
        if k not in known:
            raise ConfigError(f"estimator.{k}: unknown field")
    if sec.get("method") not in ESTIMATOR_METHODS:
        raise ConfigError(f"estimator.method: must be one of {ESTIMATOR_METHODS}")
    if sec.get("weighting") not in WEIGHTINGS:
        raise ConfigError(f"estimator.weighting: must be one of {WEIGHTINGS}")
    for g in ("lambda_grid", "hcc_grid"):
        v = sec.get(g)
        if v is None and g == "hcc_grid":
            continue
        if not isinstance(v, list) or not v or not all(isinstance(x, (int, float)) and x >= 0 for x in v):
            raise ConfigError(f"estimator.{g}: must be a non-empty list of non-negative numbers")
    n_draws = sec.get("n_draws", 0)
    if not isinstance(n_draws, int) or n_draws < 0 or n_draws == 1:
        raise ConfigError("estimator.n_draws: must be 0 or an integer >= 2")
    if not isinstance(sec.get("variance_multiplier"), (int, float)) or sec["variance_multiplier"] < 1:
        raise ConfigError("estimator.variance_multiplier: must be >= 1")
    return sec


def bid_policy(cfg: Mapping) -> BidPolicy:
    try:
        return BidPolicy.from_dict(_section(cfg, "bidding"))
    except BidPolicyError as exc:
        raise ConfigError(f"bidding: {exc}") from exc


# ---------------------------------------------------------------------------
# artifacts


class Artifacts:
    """Stage outputs and publish them together with temp-file + rename."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.staged: dict[str, bytes] = {}

    def add(self, name: str, data: str | bytes) -> None:
        self.staged[name] = data.encode() if isinstance(data, str) else data

    def commit(self) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        temps = []
        try:
            for name, data in self.staged.items():
                fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=self.out_dir)
                temps.append((tmp, self.out_dir / name))
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                    fh.flush()
                    os.fsync(fh.fileno())
            for tmp, final in temps:
                os.replace(tmp, final)
        except BaseException:
            for tmp, _ in temps:
                if os.path.exists(tmp):
                    os.unlink(tmp)
            raise

    def digest(self) -> dict[str, str]:
        return {k: hashlib.sha256(v).hexdigest() for k, v in sorted(self.staged.items())}


def _input(args, cfg: Mapping, name: str) -> str:
    path = getattr(args, name, None) or cfg.get("io", {}).get(name)
    if not path:
        raise ConfigError(f"io.{name}: input path required (or pass --{name})")
    return str(path)


def _load_store(path: str, contexts: bool = False) -> EventStore:
    rep = read_events(path, contexts=contexts)
    if rep.rejections:
        raise EventLogError(rep.rejections)
    return EventStore.from_timelines(rep.timelines)


def _load_coefficients(path: str) -> CoefficientSet:
    with open(path, encoding="utf-8") as fh:
        return CoefficientSet.from_json(fh.read())


def _load_panel(path: str) -> Panel:
    meta_path = _sidecar_path(path)
    with open(path, encoding="utf-8") as fh, open(meta_path, encoding="utf-8") as mh:
        return Panel.from_csv(fh.read(), mh.read())


def _sidecar_path(panel_path: str) -> str:
    p = Path(panel_path)
    return str(p.with_name(p.stem + ".meta.ndjson"))


def _check_hash(coef: CoefficientSet, keys) -> None:
    h = feature_config_hash(keys)
    if coef.feature_config_hash and coef.feature_config_hash != h:
        raise ConfigError(f"features: coefficients were fitted on feature set {coef.feature_config_hash}, "
                          f"config describes {h}")


def _model_keys(keys):
    return [k for k in keys if k.stock_class != "PotentialAdStock"]


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args, cfg, art: Artifacts) -> dict:
    res = simulate(market_config(cfg))
    buf = io.StringIO()
    write_events(res.store, buf)
    art.add("events.ndjson", buf.getvalue())
    gt = json.loads(ground_truth_json(res))
    gt["config_hash"] = config_hash(cfg)
    art.add("ground_truth.json", json.dumps(gt, sort_keys=True, indent=1) + "\n")
    return {"n_users": res.config.n_users, "n_bids": len(res.store.bids), "n_conversions": res.n_conversions}


def cmd_panel(args, cfg, art: Artifacts) -> dict:
    keys = feature_keys(cfg)
    pc = panel_config(cfg)
    store = _load_store(_input(args, cfg, "events"))
    panel = build_panel(store, keys, pc)
    panel.meta["config_hash"] = config_hash(cfg)
    art.add("panel.csv", panel.to_csv())
    art.add("panel.meta.ndjson", panel.sidecar())
    return panel.counts


def _fit(design, holdout, est: dict, seed: int, fhash: str) -> CoefficientSet:
    method = est["method"]
    if method == "hcc":
        return fit_hcc(design, est["lambda_grid"], holdout, hcc_grid=est.get("hcc_grid"),
                       weighting=est["weighting"], hausman_draws=int(est.get("hausman_draws", 0)), seed=seed,
                       feature_config_hash=fhash)
    if method == "ols":
        beta = ols(design)
        lam = 0.0
    elif method == "ridge":
        grid = est["lambda_grid"]
        fits = [fit_ridge(design, g) for g in grid]
        errs = [weighted_mse(holdout, b) for b in fits]
        i = int(np.argmin(errs))
        beta, lam = fits[i], float(grid[i])
    else:
        res = gmm_iv(design, 0.0, est["weighting"])
        return CoefficientSet(design.x_keys, res.beta, diagnostics={"gmm_objective": res.objective},
                              feature_config_hash=fhash)
    return CoefficientSet(design.x_keys, beta, lambda_ridge=lam, feature_config_hash=fhash)


def cmd_fit(args, cfg, art: Artifacts) -> dict:
    keys = feature_keys(cfg)
    est = estimator_config(cfg)
    pc = panel_config(cfg)
    panel = _load_panel(_input(args, cfg, "panel"))
    if list(panel.keys) != list(keys):
        raise ConfigError("features: panel columns do not match the configured feature keys")
    fhash = feature_config_hash(_model_keys(keys))
    if pc.holdout_fraction > 0:
        train, hold = panel.split_users(pc.holdout_fraction, cfg["rng_seed"])
    else:
        train = hold = panel
    d_train, d_hold = train.design(), hold.design()
    coef = _fit(d_train, d_hold, est, cfg["rng_seed"], fhash)
    if est["n_draws"] >= 2:
        bs = bayesian_bootstrap(lambda d: _fit(d, d_hold, est, cfg["rng_seed"], fhash).beta, d_train,
                                est["n_draws"], est["variance_multiplier"], seed=cfg["rng_seed"])
        coef.draws = bs.draws
    art.add("coefficients.json", coef.to_json() + "\n")
    return {"keys": [str(k) for k in coef.keys], "beta": coef.beta.tolist()}


def _as_of(cfg, store: EventStore) -> float:
    v = cfg.get("attribution", {}).get("as_of")
    return float(np.max(store.t_end)) if v is None else float(v)


def cmd_score(args, cfg, art: Artifacts) -> dict:
    keys = feature_keys(cfg)
    store = _load_store(_input(args, cfg, "events"))
    coef = _load_coefficients(_input(args, cfg, "coefficients"))
    _check_hash(coef, _model_keys(keys))
    t = _as_of(cfg, store)
    led = impression_ledger(store, coef, t)
    b = store.bids
    lines = []
    for i, j in enumerate(led.bid_index):
        rec = {"user_id": store.user_ids[b.user[j]], "impression_ref": float(b.t[j]), "as_of_t": t,
               "s_ij_partial_t": float(led.partial[i]), "r_ij_t": float(led.residual[i]),
               "delta_y_ij": float(led.delta[i]), "cost": float(led.cost[i]),
               "expected_share": None if np.isnan(led.expected_share[i]) else float(led.expected_share[i]),
               "residual_cost": None if np.isnan(led.residual_cost[i]) else float(led.residual_cost[i]),
               "accumulated_cost": None if np.isnan(led.accumulated_cost[i]) else float(led.accumulated_cost[i]),
               "zero_denominator": bool(led.zero_denominator[i])}
        lines.append(json.dumps(rec, sort_keys=True))
    art.add("impressions.ndjson", "".join(line + "\n" for line in lines))
    return {"n_impressions": len(lines)}


def cmd_report(args, cfg, art: Artifacts) -> dict:
    keys = feature_keys(cfg)
    store = _load_store(_input(args, cfg, "events"))
    coef = _load_coefficients(_input(args, cfg, "coefficients"))
    _check_hash(coef, _model_keys(keys))
    slices = cfg.get("attribution", {}).get("slices") or [{"name": "all"}]
    try:
        specs = [SliceSpec.from_dict(s) for s in slices]
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"attribution.slices: {exc}") from exc
    rows = campaign_rollup(store, coef, _as_of(cfg, store), specs)
    art.add("report.csv", report_csv(rows))
    art.add("report.json", report_json(rows))
    return {"slices": [r["slice"] for r in rows]}


def cmd_bid(args, cfg, art: Artifacts) -> dict:
    keys = feature_keys(cfg)
    policy = bid_policy(cfg)
    coef = _load_coefficients(_input(args, cfg, "coefficients"))
    _check_hash(coef, _model_keys(keys))
    store = _load_store(_input(args, cfg, "contexts"), contexts=True)
    rng = np.random.default_rng(np.random.SeedSequence([cfg["rng_seed"], 0xB1D]))
    counters = BidCounters()
    out = compute_bids(store, coef, policy, rng, seed=cfg["rng_seed"], counters=counters)
    b = store.bids
    lines = []
    for i in range(len(b)):
        rec = {"user_id": store.user_ids[b.user[i]], "t_j": float(b.t[i]),
               "ghost_bid_g": float(out["ghost_bid_g"][i]), "submitted_B": bool(out["submitted_B"][i]),
               "submitted_bid_b": float(out["submitted_bid_b"][i]),
               "draw_index": None if out["draw_index"][i] < 0 else int(out["draw_index"][i])}
        lines.append(json.dumps(rec, sort_keys=True))
    art.add("bids.ndjson", "".join(line + "\n" for line in lines))
    return {"n_bids": len(lines), "negative_value": counters.negative_value}


def cmd_validate(args, cfg, art: Artifacts) -> dict:
    rep = read_events(_input(args, cfg, "events"))
    n_bids = sum(len(t.bids) for t in rep.timelines.values())
    n_conv = sum(len(t.conversions) for t in rep.timelines.values())
    n_ret = sum(len(t.retargets) for t in rep.timelines.values())
    summary = {"records": rep.n_records, "users": len(rep.timelines), "bids": n_bids, "conversions": n_conv,
               "retargets": n_ret, "rejections": len(rep.rejections),
               "unknown_fields": rep.unknown_fields}
    print(json.dumps(summary, sort_keys=True))
    for r in rep.rejections[:50]:
        print(str(r), file=sys.stderr)
    if rep.rejections:
        raise EventLogError(rep.rejections)
    return summary


def cmd_replicate(args, cfg, art: Artifacts) -> dict:
    overrides = {}
    for a in args.param or ():
        if "=" not in a:
            raise ConfigError(f"--param {a!r}: expected name=value")
        k, v = a.split("=", 1)
        overrides[k] = _parse_value(v)
    try:
        res = run_scenario(args.scenario, cfg["rng_seed"], **overrides)
    except TypeError as exc:
        raise ConfigError(f"replicate.{args.scenario}: {exc}") from exc
    res["config_hash"] = config_hash(cfg)
    art.add(f"replicate_{args.scenario}.json", json.dumps(res, sort_keys=True, indent=1) + "\n")
    if args.scenario == "fig10":
        print(f"{'N':>8} {'RMSE(HCC,OLS)':>14} {'RMSE(HCC,2SLS)':>15}")
        for row in res["table"]:
            print(f"{row['n']:>8} {row['rmse_hcc_ols']:>14.5f} {row['rmse_hcc_2sls']:>15.5f}")
    return {k: v for k, v in res.items() if not isinstance(v, (list, dict))}


COMMANDS = {"simulate": cmd_simulate, "panel": cmd_panel, "fit": cmd_fit, "score": cmd_score,
            "report": cmd_report, "bid": cmd_bid, "validate": cmd_validate, "replicate": cmd_replicate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="global random seed (overrides rng_seed)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config field; VALUE is parsed as JSON when possible")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--threads", type=int, default=0, help="worker threads (0 = auto)")
    parser = argparse.ArgumentParser(prog="incrbid", description="Continuous-time incrementality bidding toolkit")
    parser.add_argument("--version", action="version", version=f"incrbid {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    sub.required = True
    helps = {
        "simulate": "generate a synthetic event log and ground truth",
        "panel": "build the weighted training panel from an event log",
        "fit": "fit coefficients on a panel",
        "score": "per-impression attribution records",
        "report": "campaign incrementality report",
        "bid": "compute bids for bid contexts",
        "validate": "validate an event log",
        "replicate": "run a replication scenario",
    }
    for name in SUBCOMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name in ("panel", "score", "report", "validate"):
            p.add_argument("--events", help="event log NDJSON (optionally gzipped)")
        if name == "fit":
            p.add_argument("--panel", help="panel CSV (metadata sidecar alongside)")
        if name in ("score", "report", "bid"):
            p.add_argument("--coefficients", help="coefficients JSON")
        if name == "bid":
            p.add_argument("--contexts", help="bid context NDJSON (window, bid and retarget records)")
        if name == "replicate":
            p.add_argument("scenario", choices=sorted(SCENARIOS))
            p.add_argument("--param", action="append", metavar="NAME=VALUE",
                           help="scenario size override, e.g. n_reps=5")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("INCR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    t0 = time.perf_counter()
    art = Artifacts(Path(args.out))
    try:
        cfg = load_config(args.config, args.set, args.seed)
        summary = COMMANDS[args.command](args, cfg, art)
        manifest = {
            "subcommand": args.command,
            "config_hash": config_hash(cfg),
            "seed": cfg["rng_seed"],
            "threads": args.threads,
            "versions": {"incrbid": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            "wall_seconds": round(time.perf_counter() - t0, 3),
            "artifacts": art.digest(),
            "summary": summary,
        }
        if art.staged:
            art.add(f"manifest_{args.command}.json", json.dumps(manifest, sort_keys=True, indent=1, default=str) + "\n")
            art.commit()
        log.info("%s finished in %.2fs", args.command, manifest["wall_seconds"])
        return 0
    except ConfigError as exc:
        print(f"incrbid: config error: {exc}", file=sys.stderr)
        return 2
    except EventLogError as exc:
        print(f"incrbid: invalid event log: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"incrbid: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
