"""Compare finished experiments: tables, bar charts and learning curves.

A *series* is one or more experiment directories merged under one label
(``label=id1+id2``; the label defaults to the joined ids). All series must
cover the same (environment, seed) grid.
"""

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..evaluation import ScorePanel, auc_mean, point_statistic, stratified_bootstrap_ci
from .runner import format_float, load_experiment

METRIC_ALIASES = {
    "return": "mean_eval_return",
    "score": "mean_eval_return",
    "mean_eval_return": "mean_eval_return",
    "overestimation": "overestimation",
    "q_hat": "q_hat",
    "g_hat": "g_hat",
}
TABLE_COLUMNS = ("series", "env", "n_seeds", "auc", "delta_auc", "final", "statistic",
                 "aggregate", "ci_low", "ci_high")


class GridMismatchError(ValueError):
    pass


@dataclass
class Series:
    label: str
    runs: dict  # (env, seed) -> columns

    @property
    def grid(self):
        return sorted(self.runs)

    @property
    def envs(self):
        return sorted({env for env, _ in self.runs})

    def curves(self, env, metric):
        keys = sorted(k for k in self.runs if k[0] == env)
        return [self.runs[k][metric] for k in keys], [k[1] for k in keys]

    def steps(self, env):
        key = min(k for k in self.runs if k[0] == env)
        return self.runs[key]["env_steps"]


def parse_series_spec(spec):
    label, sep, ids = spec.partition("=")
    if not sep:
        ids, label = label, label
    ids = [i for i in ids.split("+") if i]
    if not ids:
        raise ValueError(f"empty series spec {spec!r}")
    return label, ids


def load_series(spec, runs_dir):
    label, ids = parse_series_spec(spec)
    runs = {}
    for exp_id in ids:
        for cols in load_experiment(Path(runs_dir) / exp_id).values():
            key = (str(cols["env"][0]), int(cols["seed"][0]))
            if key in runs:
                raise GridMismatchError(f"series {label!r} has two runs for env/seed {key}")
            runs[key] = cols
    return Series(label, runs)


def check_grid(series):
    ref = series[0]
    for s in series[1:]:
        if s.grid != ref.grid:
            raise GridMismatchError(
                f"series {s.label!r} covers {s.grid}, but {ref.label!r} covers {ref.grid}")
    for s in series:
        for env in s.envs:
            lengths = {len(c) for c in s.curves(env, "phase_index")[0]}
            if len(lengths) != 1:
                raise GridMismatchError(f"series {s.label!r} has runs of different lengths on {env}")


def _final_values(curves):
    return np.array([c[-1] for c in curves])


def _stat_of(values, statistic):
    return point_statistic(ScorePanel({"_": values}), statistic, normalize=False)


def build_table(series, metric, statistic, baselines=None, n_resamples=2000, seed=0):
    """One row per (series, env) plus one aggregate row per series."""
    rows = []
    ref_auc = {}
    for s in series:
        per_seed_auc = {}
        for env in s.envs:
            curves, _ = s.curves(env, metric)
            auc = auc_mean(curves)
            per_seed_auc[env] = np.array([np.mean(c) for c in curves])
            ref_auc.setdefault(env, auc)
            final = _stat_of(_final_values(curves), statistic)
            rows.append({"series": s.label, "env": env, "n_seeds": len(curves), "auc": auc,
                         "delta_auc": auc - ref_auc[env], "final": final, "statistic": statistic,
                         "aggregate": float("nan"), "ci_low": float("nan"), "ci_high": float("nan")})
        panel = ScorePanel(per_seed_auc, baselines)
        agg = point_statistic(panel, statistic)
        lo = hi = float("nan")
        if all(len(v) >= 2 for v in per_seed_auc.values()):
            lo, hi = stratified_bootstrap_ci(panel, statistic, n_resamples, rng=np.random.default_rng(seed))
        rows.append({"series": s.label, "env": "ALL", "n_seeds": sum(len(v) for v in per_seed_auc.values()),
                     "auc": float("nan"), "delta_auc": float("nan"), "final": float("nan"),
                     "statistic": statistic, "aggregate": agg, "ci_low": lo, "ci_high": hi})
    return rows


def write_table(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for r in rows:
            w.writerow(format_float(r[c]) if isinstance(r[c], float) else r[c] for c in TABLE_COLUMNS)


def format_table(rows):
    header = f"{'series':<24}{'env':<12}{'seeds':>6}{'auc':>14}{'delta_auc':>14}{'final':>14}{'aggregate':>14}  ci"
    lines = [header]
    for r in rows:
        fmt = lambda x: f"{x:14.5g}" if np.isfinite(x) else f"{'':14}"  # noqa: E731
        ci = f"[{r['ci_low']:.5g}, {r['ci_high']:.5g}]" if np.isfinite(r["ci_low"]) else ""
        lines.append(f"{r['series']:<24}{r['env']:<12}{r['n_seeds']:>6}{fmt(r['auc'])}"
                     f"{fmt(r['delta_auc'])}{fmt(r['final'])}{fmt(r['aggregate'])}  {ci}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Charts


def _save_svg(fig, path, data_lines):
    """Write ``fig`` as SVG with the plotted numbers embedded as a comment."""
    import matplotlib.pyplot as plt

    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    text = Path(path).read_text()
    body = "\n".join(line.replace("--", "- -") for line in data_lines)
    comment = f"<!-- data\n{body}\n-->\n"
    head, sep, rest = text.partition("?>\n")
    Path(path).write_text(head + sep + comment + rest if sep else comment + text)


def _figure(n_panels):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "ddql"
    fig, axes = plt.subplots(1, n_panels, figsize=(4.5 * n_panels, 3.6), squeeze=False)
    return fig, axes[0]


def bar_chart(series, metric, path, mode="auc", title=None):
    """Per-env bars of the seed-pooled AUC or of the mean final-phase value."""
    envs = series[0].envs
    fig, axes = _figure(len(envs))
    data = [f"chart=bars mode={mode} metric={metric}"]
    for ax, env in zip(axes, envs):
        vals = []
        for s in series:
            curves, _ = s.curves(env, metric)
            v = auc_mean(curves) if mode == "auc" else float(np.mean(_final_values(curves)))
            vals.append(v)
            data.append(f"env={env} series={s.label} value={format_float(v)}")
        ax.bar(range(len(series)), vals, color=[f"C{i}" for i in range(len(series))])
        ax.set_xticks(range(len(series)), [s.label for s in series], rotation=20, ha="right")
        ax.axhline(0.0, color="black", linewidth=0.6)
        ax.set_title(env)
        ax.set_ylabel(f"{metric} ({'AUC' if mode == 'auc' else 'final phase'})")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    _save_svg(fig, path, data)


def curve_chart(series, metric, path, title=None):
    """Per-seed translucent traces plus the seed mean, one color per series."""
    envs = series[0].envs
    fig, axes = _figure(len(envs))
    data = [f"chart=curves metric={metric}"]
    for ax, env in zip(axes, envs):
        for i, s in enumerate(series):
            curves, seeds = s.curves(env, metric)
            x = s.steps(env)
            for seed, c in zip(seeds, curves):
                ax.plot(x, c, color=f"C{i}", alpha=0.25, linewidth=0.8)
                data.append(f"trace env={env} series={s.label} seed={seed} "
                            + " ".join(format_float(v) for v in c))
            mean = np.mean(np.stack(curves), axis=0)
            ax.plot(x, mean, color=f"C{i}", linewidth=2.0, label=s.label)
            data.append(f"mean env={env} series={s.label} " + " ".join(format_float(v) for v in mean))
        ax.set_title(env)
        ax.set_xlabel("environment steps")
        ax.set_ylabel(metric)
        ax.legend(fontsize="small")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    _save_svg(fig, path, data)


@dataclass
class ComparisonResult:
    rows: list
    table_path: Path
    chart_paths: list


def compare(specs, metric="overestimation", statistic="mean", runs_dir="runs", out_dir=None,
            baselines=None, charts=True, n_resamples=2000):
    """Build the comparison table (and charts) for the given series specs."""
    if metric not in METRIC_ALIASES:
        raise ValueError(f"metric must be one of {sorted(METRIC_ALIASES)}")
    metric = METRIC_ALIASES[metric]
    series = [load_series(s, runs_dir) for s in specs]
    check_grid(series)
    if out_dir is None:
        out_dir = Path(runs_dir) / ("compare-" + "-vs-".join(s.label for s in series))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = build_table(series, metric, statistic, baselines, n_resamples)
    table_path = out_dir / f"table_{metric}_{statistic}.csv"
    write_table(rows, table_path)
    paths = []
    if charts:
        jobs = [
            (bar_chart, (series, metric, out_dir / f"auc_{metric}.svg", "auc")),
            (bar_chart, (series, "overestimation", out_dir / "final_overestimation.svg", "final")),
            (curve_chart, (series, metric, out_dir / f"curves_{metric}.svg")),
        ]
        if metric != "overestimation":
            jobs.append((curve_chart, (series, "overestimation", out_dir / "curves_overestimation.svg")))
        for fn, args in jobs:
            fn(*args)
            paths.append(args[2])
    return ComparisonResult(rows, table_path, paths)
