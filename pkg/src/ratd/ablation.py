"""Ablation suites: arm definitions, the seed loop and table rendering."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .errors import ConfigError
from .pipeline import prepare, run_experiment

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Arm:
    name: str  # machine key
    label: str  # row label as printed in the comparison tables
    overrides: dict = field(default_factory=dict)
    group: str = ""


_NO_REFS = {"database.mechanism": "none", "network.fusion": "none"}


def _retrieval_arms():
    arms = [
        Arm("none", "-", _NO_REFS, "none"),
        Arm("random", "Random", {"database.mechanism": "random"}, "random"),
        Arm("dtw", "DTW", {"database.mechanism": "dtw"}, "dtw"),
        Arm("pearson", "Pearson", {"database.mechanism": "pearson"}, "pearson"),
    ]
    for tag, label in (("dlinear", "DLinear"), ("informer", "Informer"), ("timesnet", "TimesNet"), ("tcn", "TCN")):
        arms.append(Arm(f"encoder:{tag}", label,
                        {"database.mechanism": "encoder", "encoder.architecture": tag}, "encoder"))
    return arms


def _nk_arms():
    return [Arm(f"n{n}_k{k}", f"n={n}, k={k}",
                {"database.strategy": "category_balanced", "database.n_db": n, "database.k": k}, f"n={n}")
            for n in (16, 64, 256) for k in (1, 3, 5)]


SUITES: dict[str, list[Arm]] = {
    "retrieval_mechanism": _retrieval_arms(),
    "nk_sweep": _nk_arms(),
    "fusion_module": [
        Arm("none", "CSDI", _NO_REFS),
        Arm("linear", "CSDI+Linear", {"network.fusion": "linear"}),
        Arm("cross_attention", "CSDI+Cross Attention", {"network.fusion": "cross_attention"}),
        Arm("rma", "CSDI+RMA", {"network.fusion": "rma"}),
    ],
    "rma_position": [
        Arm("none", "-", _NO_REFS),
        Arm("back", "Back", {"network.rma_position": "back"}),
        Arm("middle", "Middle", {"network.rma_position": "middle"}),
        Arm("front", "Front", {"network.rma_position": "front"}),
    ],
    "denoise_target": [
        Arm("x0", "x0", {"diffusion.target": "x0"}),
        Arm("epsilon", "epsilon", {"diffusion.target": "epsilon"}),
    ],
}

# arm each suite treats as the recommended configuration
RECOMMENDED = {
    "retrieval_mechanism": "encoder:tcn",
    "nk_sweep": "n256_k3",
    "fusion_module": "rma",
    "rma_position": "front",
    "denoise_target": "x0",
}


def suite_arms(suite: str, names=None) -> list[Arm]:
    if suite not in SUITES:
        raise ConfigError(f"unknown ablation suite {suite!r}; choose from {sorted(SUITES)}")
    arms = SUITES[suite]
    if names is None:
        return list(arms)
    known = {a.name: a for a in arms}
    missing = [n for n in names if n not in known]
    if missing:
        raise ConfigError(f"suite {suite!r} has no arms {missing}")
    return [known[n] for n in names]


@dataclass
class AblationTable:
    suite: str
    arms: list[Arm]
    rows: list[dict]  # one per (arm, seed)
    recommended: str

    METRICS = ("mse", "mae", "crps")

    def medians(self) -> dict[str, dict[str, float]]:
        out = {}
        for arm in self.arms:
            rows = [r for r in self.rows if r["arm"] == arm.name]
            out[arm.name] = {m: float(np.median([r[m] for r in rows])) for m in self.METRICS}
        return out

    def per_seed(self, arm: str, metric: str = "mse") -> list[float]:
        return [r[metric] for r in self.rows if r["arm"] == arm]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["suite", "arm", "label", "seed", *self.METRICS, "config_fingerprint"])
        for r in self.rows:
            w.writerow([self.suite, r["arm"], r["label"], r["seed"],
                        *(repr(r[m]) for m in self.METRICS), r["config_fingerprint"]])
        med = self.medians()
        for arm in self.arms:
            w.writerow([self.suite, arm.name, arm.label, "median", *(repr(med[arm.name][m]) for m in self.METRICS), ""])
        text = buf.getvalue()
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            Path(path).write_text(text)
        return text

    def render(self) -> str:
        med = self.medians()
        width = max(len(a.label) for a in self.arms) + 2
        lines = [f"suite: {self.suite}  (median over seeds {sorted({r['seed'] for r in self.rows})})",
                 f"{'arm':<{width}}" + "".join(f"{m.upper():>10}" for m in self.METRICS)]
        for arm in self.arms:
            mark = "  *" if arm.name == self.recommended else ""
            lines.append(f"{arm.label:<{width}}" + "".join(f"{med[arm.name][m]:>10.4f}" for m in self.METRICS) + mark)
        lines.append("* recommended configuration")
        return "\n".join(lines)


def run_ablation(suite: str, config: ExperimentConfig, seeds=None, arms=None, series=None,
                 runner=None, out_dir=None) -> AblationTable:
    """Run every arm of ``suite`` for every seed on one shared dataset.

    ``runner(cfg, prep) -> MetricReport`` replaces the full training run,
    which keeps structural tests cheap.
    """
    chosen = suite_arms(suite, arms)
    seeds = list(config.eval.seeds if seeds is None else seeds)
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    prep = prepare(config, series)
    rows = []
    for arm in chosen:
        arm_cfg = config.replace(**arm.overrides)
        for seed in seeds:
            cfg = arm_cfg.replace(seed=seed)
            if runner is None:
                report = run_experiment(cfg, prep=prep).report
            else:
                report = runner(cfg, prep)
            log.info("%s %s seed=%d mse=%.4f", suite, arm.name, seed, report.mse)
            rows.append({"arm": arm.name, "label": arm.label, "seed": seed, "mse": report.mse,
                         "mae": report.mae, "crps": report.crps, "config_fingerprint": report.config_fingerprint})
    table = AblationTable(suite, chosen, rows, RECOMMENDED[suite])
    if out_dir is not None:
        out = Path(out_dir)
        table.to_csv(out / f"{suite}.csv")
        (out / f"{suite}.txt").write_text(table.render() + "\n")
    return table


def plot_forecast_fan(history, samples, truth, path, feature: int = 0, quantiles=(0.05, 0.25, 0.75, 0.95)):
    """Forecast fan (sample quantile bands and median) against the observed continuation."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    history, samples, truth = np.asarray(history), np.asarray(samples), np.asarray(truth)
    l, h = history.shape[0], truth.shape[0]
    xs_h, xs_f = np.arange(l), np.arange(l, l + h)
    q = np.quantile(samples[..., feature], quantiles, axis=0)
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.plot(xs_h, history[:, feature], color="k", lw=1, label="history")
    ax.plot(xs_f, truth[:, feature], color="k", lw=1, ls="--", label="truth")
    ax.fill_between(xs_f, q[0], q[-1], alpha=0.2, color="C0", label="90% band")
    ax.fill_between(xs_f, q[1], q[-2], alpha=0.35, color="C0", label="50% band")
    ax.plot(xs_f, np.median(samples[..., feature], axis=0), color="C0", lw=1.5, label="median")
    ax.legend(fontsize=7, loc="upper left")
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
