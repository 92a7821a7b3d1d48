"""Command-line experiment driver.

    sahmmvae run <config.json> [--out DIR] [--no-plots] [--seed S] [--epochs N]
    sahmmvae gen <config.json> <episode.json> [--seed S]
    sahmmvae compare <config.json> [--out DIR] [--jobs J] ...
    sahmmvae plot <results-dir>

Exit status: 0 success, 2 invalid configuration, 3 numerical divergence
(partial outputs are kept).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import plots
from . import synthgen as sg
from .vaemodel import TrainConfig, TrainingDiverged, TrainReport, train

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3
LOSS_WINDOW = 500
_MODEL_KEYS = {f.name for f in fields(TrainConfig)}


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------ config


@dataclass
class ExperimentConfig:
    episode: dict
    model: dict
    output: str = "results"
    plots: bool = True
    base_dir: Path = Path(".")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(raw) - {"episode", "model", "output", "plots"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls(episode=dict(raw.get("episode", {"scenario": "default"})),
                  model=dict(raw.get("model", {})),
                  output=str(raw.get("output", "results")),
                  plots=bool(raw.get("plots", True)),
                  base_dir=path.parent)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        ep = self.episode
        sources = sum(k in ep for k in ("path", "scenario", "sources"))
        if sources != 1:
            raise ConfigError("episode needs exactly one of 'path', 'scenario' or 'sources'")
        if "path" in ep and not (self.base_dir / ep["path"]).exists():
            raise ConfigError(f"episode file not found: {ep['path']}")
        if "scenario" in ep and ep["scenario"] not in sg.SCENARIOS:
            raise ConfigError(f"unknown scenario {ep['scenario']!r}; choose from {sorted(sg.SCENARIOS)}")
        if "sources" in ep and "mixing" not in ep:
            raise ConfigError("explicit sources need a 'mixing' entry")
        if int(ep.get("T", 1000)) < 2:
            raise ConfigError("T must be >= 2")
        unknown = set(self.model) - _MODEL_KEYS
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        if "lr" in self.model and not float(self.model["lr"]) > 0:
            raise ConfigError("lr must be > 0")
        self.train_config()

    def train_config(self, seed=None, epochs=None, branch=None) -> TrainConfig:
        kw = dict(self.model)
        for key, value in (("seed", seed), ("epochs", epochs), ("branch", branch)):
            if value is not None:
                kw[key] = value
        try:
            return TrainConfig(**kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"model section: {e}") from None

    def build_episode(self, seed=None) -> sg.EpisodeData:
        ep = self.episode
        try:
            if "path" in ep:
                return sg.load_episode(self.base_dir / ep["path"])
            if "scenario" in ep:
                opts = {k: ep[k] for k in ("noise_std", "stay") if k in ep}
                specs, mixing = sg.SCENARIOS[ep["scenario"]](**opts)
                if "mixing" in ep:
                    mixing = sg.MixingSpec.from_dict(ep["mixing"])
            else:
                specs = [sg.SourceSpec.from_dict(d) for d in ep["sources"]]
                mixing = sg.MixingSpec.from_dict(ep["mixing"])
            return sg.make_episode(specs, mixing, int(ep.get("T", 1000)),
                                   int(ep.get("seed", 0) if seed is None else seed))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"episode section: {e}") from None


# ------------------------------------------------------------ CSV output


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.9g" % v
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def write_loss_csv(path, report: TrainReport, n: int) -> None:
    header = (["epoch", "total", "rec", "logq", "logp", "beta"]
              + [f"corr_{j + 1}" for j in range(n)] + [f"post_var_{j + 1}" for j in range(n)])
    rows = []
    for r in report.rows:
        corr = r.get("corr", [float("nan")] * n)
        rows.append([r["epoch"], r["total"], r["rec"], r["logq"], r["logp"], r["beta"], *corr, *r["post_var"]])
    write_csv(path, header, rows)


# ------------------------------------------------------------ evaluation


@dataclass
class RunSummary:
    branch: int
    mean_abs_corr: float
    mean_state_accuracy: float
    mean_tv: float
    final_total: float
    episode_hash: str


def _relabel_matrix(P, perm):
    """Express a matrix over decoded labels in true-label coordinates."""
    p = np.asarray(perm) - 1
    out = np.empty_like(P)
    out[np.ix_(p, p)] = P
    return out


def evaluate(state, episode: sg.EpisodeData, config: TrainConfig) -> dict:
    """Match sources and states to the truth and compare transition matrices."""
    model = state.model
    Y = episode.observations
    mu = model.posterior_means(Y)
    match = ev.match_sources(mu, episode.sources)
    paths = model.prior.viterbi_paths(mu)
    A = model.prior.transition_matrices()
    post_var = model.posterior_variances()
    per_source = []
    for j, spec in enumerate(episode.source_specs):
        col = match.permutation[j]
        K = max(config.K, spec.K)
        sm = ev.match_states(paths[:, col], episode.states[:, j], K)
        rec = {"abs_corr": float(match.correlations[j]), "sign": int(match.signs[j]),
               "column": col + 1, "states": sm, "decoded": paths[:, col],
               "post_var": float(post_var[col]), "latent_var": float(mu[:, col].var()),
               "learned": A[col]}
        inferred, _ = ev.empirical_transition_matrix(paths[:, col], config.K)
        rec["empirical_inferred"] = inferred
        rec["tv_inferred"] = ev.transition_agreement(A[col], inferred).mean_tv
        if config.K == spec.K:
            true_emp, _ = ev.empirical_transition_matrix(episode.states[:, j], spec.K)
            agree = ev.transition_agreement(A[col], true_emp, sm.permutation)
            rec.update(empirical_true=true_emp, tv_true=agree.mean_tv,
                       learned_dd=agree.learned_diagonal_dominant,
                       empirical_dd=agree.empirical_diagonal_dominant)
        else:
            rec.update(empirical_true=None, tv_true=float("nan"),
                       learned_dd=ev.diagonal_dominant(A[col]), empirical_dd=False)
        per_source.append(rec)
    return {"match": match, "sources": per_source, "estimates": match.aligned(mu)}


def loss_windows(losses) -> tuple[float, float]:
    w = max(1, min(LOSS_WINDOW, len(losses) // 2))
    return float(np.mean(losses[:w])), float(np.mean(losses[-w:]))


def write_outputs(outdir: Path, episode, state, report, config: TrainConfig, make_plots: bool) -> RunSummary:
    outdir.mkdir(parents=True, exist_ok=True)
    n = episode.sources.shape[1]
    res = evaluate(state, episode, config)
    src = res["sources"]
    write_loss_csv(outdir / "loss.csv", report, n)

    T = episode.T
    idx = np.arange(1, T + 1)
    write_csv(outdir / "sources.csv",
              ["t"] + [f"true_{j + 1}" for j in range(n)] + [f"est_{j + 1}" for j in range(n)],
              [[int(t), *episode.sources[t - 1], *res["estimates"][t - 1]] for t in idx])

    decoded = np.column_stack([s["decoded"] for s in src])
    matched = np.column_stack([s["states"].relabel(s["decoded"]) for s in src])
    write_csv(outdir / "states.csv",
              ["t"] + [f"{k}_{j + 1}" for k in ("true", "decoded", "matched") for j in range(n)],
              [[int(t), *episode.states[t - 1], *decoded[t - 1], *matched[t - 1]] for t in idx])

    rows = []
    for j, s in enumerate(src):
        mats = {"learned": s["learned"], "empirical_inferred": s["empirical_inferred"],
                "empirical_true": s["empirical_true"]}
        for kind, M in mats.items():
            if M is None:
                continue
            if kind != "empirical_true" and M.shape[0] == s["states"].confusion.shape[0]:
                M = _relabel_matrix(M, s["states"].permutation)
            for a in range(M.shape[0]):
                for b in range(M.shape[1]):
                    rows.append([j + 1, kind, a + 1, b + 1, M[a, b]])
    write_csv(outdir / "transitions.csv", ["source", "kind", "from", "to", "prob"], rows)

    lead, trail = loss_windows(state.losses)
    metrics = []
    for j, s in enumerate(src):
        scope = f"source_{j + 1}"
        metrics += [(scope, "abs_corr", s["abs_corr"]), (scope, "sign", s["sign"]),
                    (scope, "matched_column", s["column"]),
                    (scope, "state_accuracy", s["states"].accuracy),
                    (scope, "tv_true", s["tv_true"]), (scope, "tv_inferred", s["tv_inferred"]),
                    (scope, "learned_diag_dominant", s["learned_dd"]),
                    (scope, "empirical_diag_dominant", s["empirical_dd"]),
                    (scope, "post_var", s["post_var"]), (scope, "latent_var", s["latent_var"])]
    summary = RunSummary(
        branch=config.branch,
        mean_abs_corr=res["match"].mean_abs_corr,
        mean_state_accuracy=float(np.mean([s["states"].accuracy for s in src])),
        mean_tv=float(np.mean([s["tv_true"] for s in src])),
        final_total=float(state.losses[-1]),
        episode_hash=episode.digest(),
    )
    metrics += [("all", "branch", config.branch), ("all", "epochs", state.epoch),
                ("all", "mean_abs_corr", summary.mean_abs_corr),
                ("all", "mean_state_accuracy", summary.mean_state_accuracy),
                ("all", "mean_tv", summary.mean_tv),
                ("all", "final_total", summary.final_total),
                ("all", "loss_leading_mean", lead), ("all", "loss_trailing_mean", trail),
                ("all", "episode_hash", summary.episode_hash)]
    write_csv(outdir / "metrics.csv", ["scope", "metric", "value"], metrics)

    (outdir / "prior.json").write_text(json.dumps(state.model.prior.snapshot(), indent=1))
    sg.save_episode(episode, outdir / "episode.json")
    if make_plots:
        plots.render_all(outdir)
    return summary


def write_partial(outdir: Path, err: TrainingDiverged, n: int, make_plots: bool) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    write_loss_csv(outdir / "loss.csv", err.report, n)
    (outdir / "diverged.json").write_text(json.dumps(
        {"message": str(err), "epoch": err.epoch, "params": err.state}))
    if make_plots and err.report.rows:
        plots.render_all(outdir)


# ------------------------------------------------------------ commands


def _train_and_write(episode, tcfg: TrainConfig, outdir: Path, make_plots: bool) -> RunSummary:
    state, report = train(episode, tcfg)
    return write_outputs(outdir, episode, state, report, tcfg, make_plots)


def run_experiment(config_path, out=None, plots_enabled=None, seed=None, epochs=None) -> int:
    try:
        cfg = ExperimentConfig.load(config_path)
        tcfg = cfg.train_config(seed=seed, epochs=epochs)
        episode = cfg.build_episode(seed=seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    outdir = Path(out or cfg.output)
    make_plots = cfg.plots if plots_enabled is None else plots_enabled
    try:
        summary = _train_and_write(episode, tcfg, outdir, make_plots)
    except TrainingDiverged as e:
        write_partial(outdir, e, episode.sources.shape[1], make_plots)
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"branch {summary.branch}: mean |corr| {summary.mean_abs_corr:.4f}, "
          f"state accuracy {summary.mean_state_accuracy:.4f}, TV {summary.mean_tv:.4f} -> {outdir}")
    return EXIT_OK


def generate_episode(config_path, out_path, seed=None) -> int:
    try:
        cfg = ExperimentConfig.load(config_path)
        episode = cfg.build_episode(seed=seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    sg.save_episode(episode, out_path)
    print(f"episode T={episode.T} n={episode.sources.shape[1]} sha256={episode.digest()[:12]} -> {out_path}")
    return EXIT_OK


def _branch_job(args):
    episode, tcfg, outdir, make_plots = args
    try:
        return _train_and_write(episode, tcfg, outdir, make_plots)
    except TrainingDiverged as e:
        write_partial(outdir, e, episode.sources.shape[1], make_plots)
        return e


def compare_branches(config_path, out=None, plots_enabled=None, seed=None, epochs=None, jobs=1) -> int:
    try:
        cfg = ExperimentConfig.load(config_path)
        tcfgs = [cfg.train_config(seed=seed, epochs=epochs, branch=b) for b in (1, 2, 3)]
        episode = cfg.build_episode(seed=seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    outdir = Path(out or cfg.output)
    make_plots = cfg.plots if plots_enabled is None else plots_enabled
    tasks = [(episode, t, outdir / f"branch{t.branch}", make_plots) for t in tcfgs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, 3)) as pool:
            results = list(pool.map(_branch_job, tasks))
    else:
        results = [_branch_job(t) for t in tasks]
    failed = [r for r in results if isinstance(r, TrainingDiverged)]
    done = [r for r in results if isinstance(r, RunSummary)]
    write_csv(outdir / "comparison.csv",
              ["branch", "mean_abs_corr", "mean_state_accuracy", "mean_tv", "final_total", "episode_hash"],
              [[s.branch, s.mean_abs_corr, s.mean_state_accuracy, s.mean_tv, s.final_total, s.episode_hash]
               for s in done])
    for s in done:
        print(f"branch {s.branch}: mean |corr| {s.mean_abs_corr:.4f}, "
              f"state accuracy {s.mean_state_accuracy:.4f}, TV {s.mean_tv:.4f}")
    if failed:
        for e in failed:
            print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sahmmvae", description="Source-wise HMM prior VAE experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("config", help="experiment config (JSON)")
        sp.add_argument("--out", help="output directory (overrides config)")
        sp.add_argument("--no-plots", action="store_true", help="skip SVG figures")
        sp.add_argument("--seed", type=int, help="episode and training seed (overrides config)")
        sp.add_argument("--epochs", type=int, help="number of epochs (overrides config)")

    common(sub.add_parser("run", help="train one branch and write CSV traces"))
    cmp_ = sub.add_parser("compare", help="train all three branches on one episode")
    common(cmp_)
    cmp_.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    gen = sub.add_parser("gen", help="generate and save a synthetic episode")
    gen.add_argument("config")
    gen.add_argument("out")
    gen.add_argument("--seed", type=int)
    plot = sub.add_parser("plot", help="regenerate SVG figures from a results directory")
    plot.add_argument("directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    if args.command in ("run", "compare") and args.seed is not None and args.seed < 0:
        print("config error: seed must be non-negative", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "run":
        return run_experiment(args.config, args.out, False if args.no_plots else None, args.seed, args.epochs)
    if args.command == "compare":
        return compare_branches(args.config, args.out, False if args.no_plots else None,
                                args.seed, args.epochs, args.jobs)
    if args.command == "gen":
        return generate_episode(args.config, args.out, args.seed)
    written = plots.render_all(args.directory)
    print(f"wrote {len(written)} figures")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
