"""Command-line experiment runner.

    restless-lab --config exp.cfg --out runs/ --seeds 0,1,2 [--policy tari] [--dry-run]

The config is a flat ``key = value`` file with dotted keys and ``#``
comments. Every key is optional; DEFAULTS lists them all.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Discretizer, ProblemInstance, read_trajectories_csv
from .forecast import (
    DEFAULT_H_SYNTHETIC,
    DEFAULT_RIDGE,
    LinearARModel,
    build_windows,
    fit_linear_ar,
    load_linear_ar,
    save_linear_ar,
    split_dataset,
    walk_forward_mae,
)
from .markov_analysis import likelihood_report, write_report_csv
from .policies import (
    ControlPolicy,
    Policy,
    RandomPolicy,
    RoundRobinPolicy,
    TariPolicy,
    WhittleModel,
    WhittlePolicy,
    estimate_transitions,
)
from .simulate import (
    EpisodeLog,
    MetricReport,
    ReplayConfig,
    build_report,
    critical_beneficiaries,
    replay_offline,
    run_synthetic_episode,
    validate_budget,
)
from .synthgen import AgentKind, make_population, simulate_history

log = logging.getLogger("restless_lab")

MODES = ("synthetic", "replay", "markov_order", "forecast_eval")
POLICIES = ("tari", "whittle", "round_robin", "random", "control")
THREADS_ENV = "RESTLESS_LAB_THREADS"
HISTORY_STREAM = 0x4157

DEFAULTS: dict[str, str] = {
    "mode": "synthetic",
    "seeds": "0",
    "policies": ",".join(POLICIES),
    "out": "runs",
    "instance.n_arms": "90",
    "instance.budget": "9",
    "instance.horizon": "52",
    "instance.threshold": "0.25",
    "synthetic.episode_mode": "test",
    "synthetic.history_mode": "train",
    "synthetic.history_per_kind": "100",
    "synthetic.history_length": "52",
    "synthetic.noise": "signed",
    "forecast.h": str(DEFAULT_H_SYNTHETIC),
    "forecast.ridge": str(DEFAULT_RIDGE),
    "forecast.exclude_random": "true",
    "forecast.model": "",
    "forecast.max_steps": "4",
    "whittle.bins": "2",
    "whittle.history": "1",
    "whittle.gamma": "0.9",
    "whittle.clusters": "3",
    "tari.horizon": "",
    "replay.method": "full_counterfactual",
    "replay.budget_fraction": "0.1",
    "replay.warmup": "0",
    "data.trajectories": "",
    "data.features": "",
    "markov.max_order": "7",
}
PATH_KEYS = ("forecast.model", "data.trajectories", "data.features")


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    values: dict[str, str] = field(default_factory=lambda: dict(DEFAULTS))
    lines: dict[str, str] = field(default_factory=dict)  # key -> "path:line" for error context

    def where(self, key: str) -> str:
        return self.lines.get(key, f"<{key}>")

    def _conv(self, key, fn, what):
        raw = self.values[key]
        try:
            return fn(raw)
        except ValueError:
            raise ConfigError(f"{self.where(key)}: {key} = {raw!r} is not {what}") from None

    def get_str(self, key: str) -> str:
        return self.values[key]

    def get_int(self, key: str) -> int:
        return self._conv(key, int, "an integer")

    def get_float(self, key: str) -> float:
        return self._conv(key, float, "a number")

    def get_bool(self, key: str) -> bool:
        raw = self.values[key].lower()
        if raw in ("1", "true", "yes", "on"):
            return True
        if raw in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{self.where(key)}: {key} = {raw!r} is not a boolean")

    def path(self, key: str) -> Path | None:
        raw = self.values[key]
        return Path(raw) if raw else None

    @property
    def mode(self) -> str:
        return self.values["mode"]

    @property
    def seeds(self) -> list[int]:
        return parse_seeds(self.values["seeds"], self.where("seeds"))

    @property
    def policies(self) -> list[str]:
        return [p.strip() for p in self.values["policies"].split(",") if p.strip()]

    def set(self, key: str, value: str, origin: str) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"{origin}: unknown key {key!r}")
        self.values[key] = value
        self.lines[key] = origin


def parse_seeds(raw: str, where: str = "--seeds") -> list[int]:
    try:
        seeds = [int(s) for s in raw.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"{where}: seeds must be comma-separated integers, got {raw!r}") from None
    if not seeds:
        raise ConfigError(f"{where}: seed list is empty")
    return seeds


def parse_config(text: str, origin: str = "<config>") -> Config:
    cfg = Config()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (x.strip() for x in line.split("=", 1))
        if not key:
            raise ConfigError(f"{origin}:{lineno}: empty key")
        cfg.set(key, value, f"{origin}:{lineno}")
    return cfg


def load_config(path) -> Config:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return parse_config(text, str(path))


# --- validation ----------------------------------------------------------------


@dataclass
class Diagnostic:
    level: str  # "error" or "warning"
    where: str
    message: str

    def __str__(self):
        return f"{self.level}: {self.where}: {self.message}"


def validate(cfg: Config) -> list[Diagnostic]:
    """Check a config without running anything. An empty list means ok."""
    out: list[Diagnostic] = []

    def err(key, msg):
        out.append(Diagnostic("error", cfg.where(key), msg))

    def warn(key, msg):
        out.append(Diagnostic("warning", cfg.where(key), msg))

    def get(kind, key):
        try:
            return getattr(cfg, kind)(key)
        except ConfigError as exc:
            out.append(Diagnostic("error", cfg.where(key), str(exc).split(": ", 1)[-1]))
            return None

    if cfg.mode not in MODES:
        err("mode", f"mode {cfg.mode!r} is not one of {', '.join(MODES)}")
    try:
        cfg.seeds
    except ConfigError as exc:
        err("seeds", str(exc).split(": ", 1)[-1])
    for p in cfg.policies:
        if p not in POLICIES:
            err("policies", f"unknown policy {p!r}; choose from {', '.join(POLICIES)}")
    if not cfg.policies and cfg.mode in ("synthetic", "replay"):
        err("policies", "policy list is empty")
    for key in PATH_KEYS:
        p = cfg.path(key)
        if p is not None and not p.exists():
            err(key, f"path {str(p)!r} does not exist")

    n, k, horizon = get("get_int", "instance.n_arms"), get("get_int", "instance.budget"), get("get_int", "instance.horizon")
    thr = get("get_float", "instance.threshold")
    if None not in (n, k, horizon, thr):
        try:
            ProblemInstance(n, k, horizon, thr)
        except ValueError as exc:
            err("instance.budget", f"ProblemInstance invariant violated: {exc}")
    if cfg.mode == "synthetic" and n is not None and n % len(AgentKind):
        err("instance.n_arms", f"synthetic populations split arms equally over {len(AgentKind)} kinds; {n} is not divisible")
    for key in ("synthetic.episode_mode", "synthetic.history_mode"):
        if cfg.get_str(key) not in ("train", "test"):
            err(key, f"{key} must be train or test")
    if cfg.get_str("synthetic.noise") not in ("signed", "symmetric"):
        err("synthetic.noise", "noise must be signed or symmetric")
    if cfg.get_str("replay.method") not in ("full_counterfactual", "remove_on_deviation"):
        err("replay.method", "replay.method must be full_counterfactual or remove_on_deviation")
    frac = get("get_float", "replay.budget_fraction")
    if frac is not None and not 0 < frac <= 1:
        err("replay.budget_fraction", "budget fraction must lie in (0, 1]")
    for key, lo in (("whittle.bins", 2), ("whittle.history", 1), ("whittle.clusters", 1), ("forecast.h", 1),
                    ("markov.max_order", 1), ("forecast.max_steps", 1), ("synthetic.history_per_kind", 1)):
        v = get("get_int", key)
        if v is not None and v < lo:
            err(key, f"{key} must be >= {lo}")
    gamma = get("get_float", "whittle.gamma")
    if gamma is not None and not 0 < gamma < 1:
        err("whittle.gamma", "discount must lie in (0, 1)")
    get("get_float", "forecast.ridge")
    get("get_bool", "forecast.exclude_random")
    get("get_int", "replay.warmup")
    if cfg.get_str("tari.horizon"):
        get("get_int", "tari.horizon")

    if cfg.mode in ("replay",) and cfg.path("data.trajectories") is None:
        err("data.trajectories", "replay mode needs a trajectory CSV")

    h = get("get_int", "forecast.h")
    lengths = []
    if cfg.mode == "synthetic" or (cfg.mode != "replay" and cfg.path("data.trajectories") is None):
        L = get("get_int", "synthetic.history_length")
        lengths = [L] if L is not None else []
    elif cfg.path("data.trajectories") is not None and cfg.path("data.trajectories").exists():
        try:
            lengths = [len(t) for t in read_trajectories_csv(cfg.path("data.trajectories"))]
        except ValueError as exc:
            err("data.trajectories", str(exc))
    if h is not None and lengths and h >= max(lengths):
        warn("forecast.h", f"h={h} is not shorter than any trajectory (max length {max(lengths)}); window sets will be empty")
    mo = get("get_int", "markov.max_order")
    if cfg.mode == "markov_order" and mo is not None and lengths and mo >= max(lengths):
        warn("markov.max_order", f"order {mo} leaves no transitions in trajectories of length <= {max(lengths)}")
    return out


# --- pipeline pieces -------------------------------------------------------------


def history_seed(seed: int) -> int:
    """Seed of the historical population, distinct from the episode population's."""
    return int(np.random.SeedSequence([seed, HISTORY_STREAM]).generate_state(1)[0])


def synthetic_history(cfg: Config, seed: int):
    hs = history_seed(seed)
    agents = make_population(cfg.get_int("synthetic.history_per_kind"), cfg.get_str("synthetic.history_mode"), hs,
                             noise=cfg.get_str("synthetic.noise"))
    return agents, simulate_history(agents, cfg.get_int("synthetic.history_length"), hs)


def train_forecaster(cfg: Config, trajectories, seed: int, keep=None):
    """Fit a LinearARModel on the train split, or load the configured one.

    ``keep`` optionally masks arm ids eligible for training. Returns the
    model and the held-out test arm ids.
    """
    ds = build_windows(trajectories, cfg.get_int("forecast.h"))
    if keep is not None:
        ds = ds.subset(np.isin(ds.arm_ids, list(keep)))
    if len(ds) == 0:
        raise ValueError("no training windows: trajectories are shorter than forecast.h + 1")
    train, _, test = split_dataset(ds, rng=seed)
    test_arms = np.unique(test.arm_ids)
    path = cfg.path("forecast.model")
    if path is not None:
        model = load_linear_ar(path)
        if model.h != cfg.get_int("forecast.h"):
            raise ValueError(f"{path}: model window h={model.h} differs from forecast.h={cfg.get_int('forecast.h')}")
        return model, test_arms
    return fit_linear_ar(train, cfg.get_float("forecast.ridge")), test_arms


def whittle_model(cfg: Config, trajectories, seed: int) -> WhittleModel:
    d = Discretizer(cfg.get_int("whittle.bins"), cfg.get_float("instance.threshold"))
    n_clusters = cfg.get_int("whittle.clusters")
    if any(t.features is None for t in trajectories):
        n_clusters = 1
    return estimate_transitions(trajectories, d, cfg.get_int("whittle.history"), n_clusters,
                                gamma=cfg.get_float("whittle.gamma"), seed=seed)


def make_policy(name: str, cfg: Config, model: LinearARModel | None, wm: WhittleModel | None) -> Policy:
    if name == "tari":
        H = cfg.get_int("tari.horizon") if cfg.get_str("tari.horizon") else cfg.get_int("instance.horizon")
        return TariPolicy(model, cfg.get_float("instance.threshold"), H)
    if name == "whittle":
        return WhittlePolicy(wm)
    if name == "round_robin":
        return RoundRobinPolicy()
    if name == "random":
        return RandomPolicy()
    if name == "control":
        return ControlPolicy()
    raise ValueError(f"unknown policy {name!r}")


@dataclass
class SyntheticSetup:
    instance: ProblemInstance
    agents: list
    forecaster: LinearARModel
    whittle: WhittleModel
    exclude: np.ndarray


def prepare_synthetic(cfg: Config, seed: int) -> SyntheticSetup:
    """Everything one synthetic seed needs: learned models plus the episode population."""
    history, keep = _dataset_synthetic(cfg, seed)
    model, _ = train_forecaster(cfg, history, seed, keep)
    wm = whittle_model(cfg, history, seed)
    n = cfg.get_int("instance.n_arms")
    inst = ProblemInstance(n, cfg.get_int("instance.budget"), cfg.get_int("instance.horizon"), cfg.get_float("instance.threshold"))
    agents = make_population(n // len(AgentKind), cfg.get_str("synthetic.episode_mode"), seed, noise=cfg.get_str("synthetic.noise"))
    exclude = np.array([a.kind == AgentKind.RANDOM for a in agents])
    return SyntheticSetup(inst, agents, model, wm, exclude)


def run_synthetic_seed(cfg: Config, seed: int, policies: list[str]) -> dict[str, tuple[EpisodeLog, MetricReport]]:
    setup = prepare_synthetic(cfg, seed)
    logs = {}
    for name in policies:
        pol = make_policy(name, cfg, setup.forecaster, setup.whittle)
        lg = run_synthetic_episode(setup.instance, setup.agents, pol, seed)
        validate_budget(lg)
        logs[name] = lg
    thr = setup.instance.threshold
    return {name: (lg, build_report(lg, thr, control=logs.get("control"), baselines=logs, exclude=setup.exclude))
            for name, lg in logs.items()}


def run_replay_seed(cfg: Config, seed: int, policies: list[str]) -> dict[str, tuple[EpisodeLog, MetricReport]]:
    data = read_trajectories_csv(cfg.path("data.trajectories"), cfg.path("data.features"))
    model, _ = train_forecaster(cfg, data, seed)
    wm = whittle_model(cfg, data, seed)
    # the counterfactual simulator sees every arm; the policy's forecaster only the train split
    rc = ReplayConfig(fit_linear_ar(build_windows(data, model.h), cfg.get_float("forecast.ridge")),
                      cfg.get_str("replay.method"))
    thr = cfg.get_float("instance.threshold")
    try:
        critical = critical_beneficiaries(data, thr)
    except ValueError as exc:
        log.warning("critical beneficiaries skipped: %s", exc)
        critical = None
    logs = {}
    for name in policies:
        pol = make_policy(name, cfg, model, wm)
        lg = replay_offline(data, pol, rc, cfg.get_float("replay.budget_fraction"), seed, warmup=cfg.get_int("replay.warmup"))
        validate_budget(lg)
        logs[name] = lg
    return {name: (lg, build_report(lg, thr, control=logs.get("control"), baselines=logs, critical=critical))
            for name, lg in logs.items()}


# --- output --------------------------------------------------------------------

def _flat_metrics(report: MetricReport) -> dict[str, float]:
    out = {"mean_engaged_fraction": report.mean_engaged_fraction}
    for base, metrics in report.appendix_j.items():
        for k, v in metrics.items():
            if k != "relative_increase_defined":
                out[f"vs_{base}.{k}"] = float(v)
    return out


def write_aggregate(path, reports: dict[str, list[MetricReport]]) -> None:
    """Per-policy mean and sample standard deviation of every scalar metric across seeds."""
    rows = []
    for policy, reps in reports.items():
        flat = [_flat_metrics(r) for r in reps]
        keys = sorted(set().union(*flat), key=lambda k: (k != "mean_engaged_fraction", k))
        for key in keys:
            vals = np.array([f.get(key, math.nan) for f in flat], dtype=float)
            sd = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
            rows.append([policy, key, vals.size, repr(float(np.mean(vals))), repr(sd)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "metric", "n_seeds", "mean", "std"])
        w.writerows(rows)


def _threads() -> int:
    raw = os.environ.get(THREADS_ENV, "")
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{THREADS_ENV}={raw!r} is not an integer") from None


def run_episodes(cfg: Config, out: Path) -> None:
    runner = run_synthetic_seed if cfg.mode == "synthetic" else run_replay_seed
    seeds, policies = cfg.seeds, cfg.policies
    workers = min(_threads(), len(seeds))
    # seeds are independent jobs; policies of one seed share the learned models
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda s: runner(cfg, s, policies), seeds))
    else:
        results = [runner(cfg, s, policies) for s in seeds]
    reports: dict[str, list[MetricReport]] = {p: [] for p in policies}
    for seed, res in zip(seeds, results):
        for name in policies:
            lg, rep = res[name]
            d = out / name / str(seed)
            d.mkdir(parents=True, exist_ok=True)
            lg.write_csv(d / "episode.csv")
            (d / "metrics.json").write_text(rep.to_json() + "\n")
            reports[name].append(rep)
    write_aggregate(out / "aggregate.csv", reports)


def _dataset_synthetic(cfg: Config, seed: int):
    agents, history = synthetic_history(cfg, seed)
    keep = None
    if cfg.get_bool("forecast.exclude_random"):
        keep = [t.arm_id for t, a in zip(history, agents) if a.kind != AgentKind.RANDOM]
    return history, keep


def _dataset(cfg: Config, seed: int):
    """Configured trajectory file, else a synthetic history. Returns (trajectories, trainable arm ids or None)."""
    path = cfg.path("data.trajectories")
    if path is not None:
        return read_trajectories_csv(path, cfg.path("data.features")), None
    return _dataset_synthetic(cfg, seed)


def run_markov_order(cfg: Config, out: Path) -> None:
    d = Discretizer(cfg.get_int("whittle.bins"), cfg.get_float("instance.threshold"))
    for seed in cfg.seeds:
        report = likelihood_report(_dataset(cfg, seed)[0], d, cfg.get_int("markov.max_order"))
        dest = out / str(seed)
        dest.mkdir(parents=True, exist_ok=True)
        write_report_csv(dest / "markov_order.csv", report)


def run_forecast_eval(cfg: Config, out: Path) -> None:
    rows = []
    for seed in cfg.seeds:
        data, keep = _dataset(cfg, seed)
        model, test_arms = train_forecaster(cfg, data, seed, keep)
        test = [t for t in data if t.arm_id in set(test_arms.tolist())]
        dest = out / str(seed)
        dest.mkdir(parents=True, exist_ok=True)
        save_linear_ar(model, dest / "model.txt")
        for steps in range(1, cfg.get_int("forecast.max_steps") + 1):
            rows.append([seed, steps, repr(walk_forward_mae(model, test, steps_ahead=steps))])
    with open(out / "forecast_eval.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["seed", "steps_ahead", "mae"])
        w.writerows(rows)


def run(cfg: Config) -> int:
    problems = validate(cfg)
    errors = [p for p in problems if p.level == "error"]
    for p in problems:
        print(p, file=sys.stderr)
    if errors:
        return 2
    out = Path(cfg.get_str("out"))
    out.mkdir(parents=True, exist_ok=True)
    if cfg.mode in ("synthetic", "replay"):
        run_episodes(cfg, out)
    elif cfg.mode == "markov_order":
        run_markov_order(cfg, out)
    else:
        run_forecast_eval(cfg, out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="restless-lab", description="Run restless-bandit intervention experiments.")
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--out", help="output directory")
    p.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--policy", help="policy name (or comma list) overriding the config")
    p.add_argument("--dry-run", action="store_true", help="validate the config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else Config()
        for key, val in (("mode", args.mode), ("out", args.out), ("seeds", args.seeds), ("policies", args.policy)):
            if val is not None:
                cfg.set(key, val, f"--{'policy' if key == 'policies' else key}")
        if args.dry_run:
            problems = validate(cfg)
            for p in problems:
                print(p)
            if not problems:
                print("ok")
            return 2 if any(p.level == "error" for p in problems) else 0
        return run(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
