import csv
import json
import os
import platform
from datetime import datetime, timezone
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy

from models import (
    Assignment,
    DoublingProbeResult,
    HolderEstimate,
    OODResult,
    RateFit,
    RiskReport,
    SampleSet,
    SweepRow,
    TabulatedDensity,
    TrainHistory,
    TransportNet,
)
from seed_manager import content_digest

PACKAGE_VERSION = "0.1.0"
CHECKPOINT_FORMAT = 1
SWEEP_HEADER = ["N", "repeat", "val_w2", "train_loss", "best_iter", "iterations", "diverged", "seed"]
RISK_FIELDS = ["n", "empirical_risk", "population_risk_estimate", "population_risk_stderr", "eps_gen",
               "eps_opt", "eps_app", "eps_disc", "eps_app_l2", "stat_term", "generalization_bound",
               "lipschitz_bound"]


def fmt(value) -> str:
    """Shortest lossless text for CSV cells; None becomes an empty cell"""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


class ArtifactStore:
    """Owns one run directory: CSV artifacts, manifests, checkpoints and plots"""

    def __init__(self, out_dir: str = "runs"):
        self.out_dir = out_dir
        os.makedirs(self.out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def _write_csv(self, name: str, header: Sequence[str], rows, comments: Sequence[str] = (),
                   trailer: Sequence[str] = ()) -> str:
        path = self.path(name)
        with open(path, "w", newline="") as f:
            for line in comments:
                f.write(f"# {line}\n")
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([fmt(v) for v in row])
            for line in trailer:
                f.write(f"# {line}\n")
        return path

    @staticmethod
    def _read_csv(path: str) -> Tuple[List[str], List[List[str]], List[str]]:
        """Header, data rows and comment lines (without the leading '# ')"""
        comments, body = [], []
        with open(path, "r", newline="") as f:
            for line in f:
                if line.startswith("#"):
                    comments.append(line[1:].strip())
                elif line.strip():
                    body.append(line)
        if not body:
            raise ValueError(f"{path} has no CSV header")
        parsed = list(csv.reader(body))
        return parsed[0], parsed[1:], comments

    # -- measures ---------------------------------------------------------

    def write_density(self, density: TabulatedDensity, name: str = "density.csv") -> str:
        if density.domain.kind == "unit_disk":
            r, theta = density.grid
            x1 = np.outer(r, np.cos(theta)).ravel()
            x2 = np.outer(r, np.sin(theta)).ravel()
            return self._write_csv(name, ["x1", "x2", "value"], zip(x1, x2, density.values.ravel()))
        return self._write_csv(name, ["x", "value", "cdf"], zip(density.grid, density.values, density.cdf))

    def write_samples(self, samples: SampleSet, name: str = "samples.csv") -> str:
        header = [f"x{k + 1}" for k in range(samples.dim)]
        comment = f"measure_id={samples.measure_id},seed={samples.seed},N={samples.N}"
        return self._write_csv(name, header, samples.points, comments=[comment])

    def read_samples(self, name: str) -> SampleSet:
        header, rows, comments = self._read_csv(self.path(name))
        meta = {}
        for comment in comments:
            for item in comment.split(","):
                if "=" in item:
                    key, value = item.split("=", 1)
                    meta[key.strip()] = value.strip()
        points = np.array([[float(v) for v in row] for row in rows]).reshape(-1, len(header))
        if "N" in meta and int(meta["N"]) != len(points):
            raise ValueError(f"{name}: header says N={meta['N']}, found {len(points)} rows")
        return SampleSet(points, meta.get("measure_id", "samples"), int(meta.get("seed", 0)))

    # -- transport and training --------------------------------------------

    def write_assignment(self, assignment: Assignment, xs: SampleSet, ys: SampleSet,
                         name: str = "assignment.csv") -> str:
        sigma = assignment.sigma
        costs = np.sum((xs.points - ys.points[sigma]) ** 2, axis=1)
        return self._write_csv(name, ["i", "sigma_i", "sq_cost_i"], zip(range(len(sigma)), sigma, costs))

    def write_history(self, history: TrainHistory, name: str = "history.csv") -> str:
        rows = zip(range(len(history.losses)), history.losses, history.lrs, history.is_best)
        return self._write_csv(name, ["iter", "loss", "lr", "is_best"], rows)

    def save_checkpoint(self, net: TransportNet, step: int = 0, name: str = "checkpoint.npz") -> str:
        path = self.path(name)
        arrays = {f"w{l}": w for l, w in enumerate(net.weights)}
        arrays.update({f"b{l}": b for l, b in enumerate(net.biases)})
        np.savez(path, format_version=CHECKPOINT_FORMAT, layer_dims=np.array(net.layer_dims),
                 seed=np.array("" if net.seed is None else str(net.seed)), step=step, **arrays)
        return path

    @staticmethod
    def load_checkpoint(path: str) -> Tuple[TransportNet, int]:
        with np.load(path) as data:
            if int(data["format_version"]) != CHECKPOINT_FORMAT:
                raise ValueError(f"Unsupported checkpoint format {int(data['format_version'])}")
            dims = tuple(int(d) for d in data["layer_dims"])
            weights = [data[f"w{l}"] for l in range(len(dims) - 1)]
            biases = [data[f"b{l}"] for l in range(len(dims) - 1)]
            seed = str(data["seed"])
            step = int(data["step"])
        return TransportNet(dims, weights, biases, int(seed) if seed else None), step

    # -- risk ------------------------------------------------------------

    def write_sweep(self, rows: Sequence[SweepRow], fit: Optional[RateFit] = None,
                    example: str = "1d", name: str = "sweep.csv") -> str:
        body = [[getattr(row, key) for key in SWEEP_HEADER] for row in rows]
        trailer = []
        if fit is not None:
            trailer.append(f"summary slope={fmt(fit.slope)},intercept={fmt(fit.intercept)},"
                           f"predicted_slope={fmt(fit.predicted_slope)},excluded_runs={fit.excluded_runs}")
        return self._write_csv(name, SWEEP_HEADER, body, comments=[f"example={example}"], trailer=trailer)

    @classmethod
    def read_sweep(cls, path: str) -> Tuple[List[SweepRow], str]:
        """Rows of a sweep CSV and the example it was run on"""
        header, rows, comments = cls._read_csv(path)
        if header != SWEEP_HEADER:
            raise ValueError(f"{path} is not a sweep CSV (header {header})")
        example = next((c.split("=", 1)[1] for c in comments if c.startswith("example=")), "1d")
        parsed = [SweepRow(int(r[0]), int(r[1]), float(r[2]), float(r[3]), int(r[4]), int(r[5]),
                           r[6] == "1", int(r[7])) for r in rows]
        return parsed, example

    def find_sweeps(self) -> List[str]:
        found = []
        for root, _, files in os.walk(self.out_dir):
            found.extend(os.path.join(root, f) for f in files if f.startswith("sweep") and f.endswith(".csv"))
        return sorted(found)

    def write_rate_table(self, fit: RateFit, name: str = "rate_table.csv") -> str:
        rows = zip(fit.n_list, fit.means, fit.stderrs, fit.residuals or [None] * len(fit.n_list))
        trailer = [f"summary slope={fmt(fit.slope)},intercept={fmt(fit.intercept)},"
                   f"predicted_slope={fmt(fit.predicted_slope)},repeats={fit.repeats},"
                   f"excluded_runs={fit.excluded_runs}"]
        return self._write_csv(name, ["N", "mean_w2", "stderr", "residual"], rows, trailer=trailer)

    def write_risk(self, reports: Sequence[RiskReport], name: str = "risk.csv") -> str:
        rows = [[getattr(rep, key) for key in RISK_FIELDS] for rep in reports]
        trailer = [f"note {key}: {text}" for key, text in (reports[0].notes.items() if reports else [])]
        return self._write_csv(name, RISK_FIELDS, rows, trailer=trailer)

    def write_doubling(self, result: DoublingProbeResult, name: str = "doubling.csv") -> str:
        trailer = [
            f"summary max_ratio={fmt(result.max_ratio)},trials={result.trials}",
            "worst_center=" + ";".join(fmt(v) for v in np.ravel(result.worst_center)),
            "worst_matrix=" + ";".join(fmt(v) for v in np.ravel(result.worst_matrix)),
        ]
        return self._write_csv(name, ["trial", "ratio"], enumerate(result.ratios), trailer=trailer)

    def write_holder(self, estimate: HolderEstimate, name: str = "holder.csv") -> str:
        keys = ["beta", "constant", "pairs", "r_max", "beta_stderr", "beta_lower", "raw_slope"]
        return self._write_csv(name, keys, [[getattr(estimate, k) for k in keys]])

    def write_ood(self, results: Sequence[Tuple[str, OODResult]], name: str = "ood.csv") -> str:
        rows = [[label, r.lhs, r.rhs, r.slack, r.tolerance, r.w2_shift] for label, r in results]
        path = self.path(name)
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["config", "lhs", "rhs", "slack", "tolerance", "w2_shift"])
            for row in rows:
                writer.writerow([row[0]] + [fmt(v) for v in row[1:]])
        return path

    # -- manifest and plots ------------------------------------------------

    def write_manifest(self, command: str, config: Dict, inputs: Optional[Dict] = None,
                       outputs: Sequence[str] = (), name: Optional[str] = None,
                       status: str = "ok", error: Optional[str] = None) -> str:
        """JSON manifest: config echo, versions, BLAKE2b input hashes and a UTC timestamp"""
        manifest = {
            "command": command,
            "status": status,
            "created_at": datetime.now(timezone.utc).isoformat(),
            "versions": {
                "deepparticle": PACKAGE_VERSION,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
            "config": config,
            "input_hashes": {key: content_digest(value) for key, value in (inputs or {}).items()},
            "outputs": {os.path.basename(p): self._file_digest(p) for p in outputs},
        }
        if error is not None:
            manifest["error"] = error
        path = self.path(name or f"manifest_{command}.json")
        with open(path, "w") as f:
            json.dump(manifest, f, indent=2)
        return path

    @staticmethod
    def _file_digest(path: str) -> str:
        with open(path, "rb") as f:
            return content_digest(f.read())

    def plot_rate(self, fit: RateFit, name: str = "rate.svg", title: str = "") -> str:
        """Log-log plot of mean validation W2 against N with the fitted line"""
        import matplotlib
        matplotlib.use("Agg")
        matplotlib.rcParams["svg.hashsalt"] = "deepparticle"
        import matplotlib.pyplot as plt

        n = np.asarray(fit.n_list, dtype=float)
        fig, ax = plt.subplots(figsize=(6, 4.5))
        ax.errorbar(n, fit.means, yerr=fit.stderrs, fmt="o", color="C0", capsize=3, label="mean validation $W_2$")
        line_n = np.logspace(np.log10(n.min()), np.log10(n.max()), 50)
        ax.plot(line_n, 10 ** fit.intercept * line_n ** fit.slope, "r-",
                label=f"fit: slope {fit.slope:.4f}, intercept {fit.intercept:.4f}")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("N")
        ax.set_ylabel("$W_2$")
        if title:
            ax.set_title(title)
        ax.legend()
        ax.grid(True, which="both", alpha=0.3)
        path = self.path(name)
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        return path
