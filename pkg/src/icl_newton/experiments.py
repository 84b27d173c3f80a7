"""Experiment configuration and the batch driver behind the ``icl`` command."""
from __future__ import annotations

import copy
import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .construct import COVARIANCE_SCALED, GRAM_SCALED, build_newton_program, encode_prompt, prompt_columns
from .errors import ConfigError, IclError, InvalidSpec
from .report import (bestmatch_csv, curves_svg, grid_csv, render_heatmap, safe_name, trace_csv, write_csv,
                     write_manifest, write_text)
from .similarity import (AlgorithmHandle, SimilarityMatrix, best_match_matrix, fit_line, forgetting_curve,
                         prefix_stack, solver_handle, span_residuals)
from .solvers import (AutoInvLmax, FixedAlpha, FixedEta, PaperBoundary, Safe, SolverConfig, gram, n_steps,
                      newton_alpha, newton_run, pinv_psd, predict, run_solver, weight_iterates)
from .taskgen import CovSpec, NoiseSpec, TaskInstance, TaskTemplate, sample_batch, write_jsonl
from .transformer import run_program

KINDS = ("convergence", "simgrid", "bestmatch", "forgetting", "construct", "span", "gen")
SVG_CELL_LIMIT = 50_000


# ---------------------------------------------------------------------------
# configuration


def _eta_mode(doc) -> AutoInvLmax | FixedEta:
    if doc is None or doc == "auto" or doc.get("kind") == "auto":
        return AutoInvLmax()
    if doc.get("kind") == "fixed":
        return FixedEta(float(doc["value"]))
    raise ConfigError(f"unknown eta mode {doc!r}")


def _alpha_mode(doc):
    if doc is None or doc == "safe":
        return Safe()
    if doc == "boundary":
        return PaperBoundary()
    kind = doc.get("kind")
    if kind == "safe":
        return Safe(float(doc.get("factor", 0.95)))
    if kind == "boundary":
        return PaperBoundary()
    if kind == "fixed":
        return FixedAlpha(float(doc["value"]))
    raise ConfigError(f"unknown alpha mode {doc!r}")


@dataclass(frozen=True)
class AlgoSpec:
    name: str
    solver: SolverConfig

    @staticmethod
    def from_dict(doc: dict) -> "AlgoSpec":
        if "algo" not in doc:
            raise ConfigError(f"algorithm entry without 'algo': {doc}")
        try:
            cfg = SolverConfig(doc["algo"], int(doc.get("max_steps", 30)), _eta_mode(doc.get("eta")),
                               _alpha_mode(doc.get("alpha")), float(doc.get("lam", 0.0)), int(doc.get("memory", 5)))
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"bad algorithm entry {doc}: {exc}") from exc
        return AlgoSpec(str(doc.get("name", cfg.label)), cfg)

    def handle(self) -> AlgorithmHandle:
        return solver_handle(self.solver, self.name)


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    template: TaskTemplate
    batch: int
    base_seed: int
    algorithms: tuple[AlgoSpec, ...]
    output: str
    options: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    def tasks(self) -> list[TaskInstance]:
        return sample_batch(self.batch, self.template, self.base_seed)

    def algorithm(self, name: str) -> AlgoSpec:
        for spec in self.algorithms:
            if spec.name == name:
                return spec
        raise ConfigError(f"unknown algorithm {name!r}")


def parse_config(doc: dict, kind: str | None = None, seed: int | None = None, output: str | None = None,
                 min_algorithms: int | None = None) -> ExperimentConfig:
    """Validate a config document; ``kind``/``seed``/``output`` override it.

    ``min_algorithms`` replaces the per-kind minimum number of configured
    algorithms (imported traces supply the other side of a comparison).
    """
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    doc = copy.deepcopy(doc)
    if kind is not None:
        if "experiment" in doc and doc["experiment"] != kind:
            raise ConfigError(f"config is for {doc['experiment']!r}, command runs {kind!r}")
        doc["experiment"] = kind
    kind = doc.get("experiment")
    if kind not in KINDS:
        raise ConfigError(f"experiment must be one of {KINDS}, got {kind!r}")
    task = doc.setdefault("task", {})
    if seed is not None:
        task["base_seed"] = int(seed)
    if output is not None:
        doc["output"] = output
    try:
        cov = CovSpec.from_dict(task.get("cov", {"kind": "identity"}))
        template = TaskTemplate(int(task.get("d", 20)), int(task.get("n", 40)), cov, NoiseSpec(float(task.get("noise", 0.0))))
        cov.validate(template.dim)
        if template.dim < 1 or template.n < 1:
            raise InvalidSpec("d and n must be positive")
        batch = int(task.get("batch", 64))
        base_seed = int(task.get("base_seed", 0))
        if batch < 1 or base_seed < 0:
            raise InvalidSpec("batch must be >= 1 and base_seed >= 0")
    except (IclError, ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"bad task section: {exc}") from exc
    algos = tuple(AlgoSpec.from_dict(a) for a in doc.get("algorithms", []))
    names = [a.name for a in algos]
    if len(set(names)) != len(names):
        raise ConfigError(f"algorithm names must be unique: {names}")
    needs = {"convergence": 1, "simgrid": 2, "bestmatch": 2, "forgetting": 1, "span": 1}
    need = needs.get(kind, 0) if min_algorithms is None else min_algorithms
    if len(algos) < need:
        raise ConfigError(f"{kind} needs at least {need} algorithms")
    options = {k: v for k, v in doc.items() if k not in ("experiment", "task", "algorithms", "output")}
    if "output" not in doc:
        raise ConfigError("config needs an output directory")
    return ExperimentConfig(kind, template, batch, base_seed, algos, str(doc["output"]), options, doc)


def load_config(path, **overrides) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_config(doc, **overrides)


# ---------------------------------------------------------------------------
# experiments


@dataclass
class ReportBundle:
    out_dir: Path
    files: list[str]
    summary: dict
    ok: bool = True


def reference_weights(spec: AlgoSpec, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Minimizer of the algorithm's own objective: ridge when lambda > 0, else OLS."""
    lam = spec.solver.lam if spec.solver.algo != "ols" else 0.0
    s, b = gram(xs, ys, lam)
    return np.einsum("bij,bj->bi", pinv_psd(s), b)


def convergence_curves(spec: AlgoSpec, tasks) -> np.ndarray:
    """Relative error vs the reference minimizer, (steps+1, batch), full prefixes."""
    xs = np.stack([t.xs[:t.n_examples] for t in tasks])
    ys = np.stack([t.ys[:t.n_examples] for t in tasks])
    lengths = np.full(len(tasks), xs.shape[1])
    ref = reference_weights(spec, xs, ys)
    norm = np.linalg.norm(ref, axis=1)
    return np.stack([np.linalg.norm(w - ref, axis=1) / norm for w in weight_iterates(spec.solver, xs, ys, lengths)])


def _run_convergence(cfg: ExperimentConfig, out: Path) -> ReportBundle:
    tasks = cfg.tasks()
    rows, curves, summary = [], {}, {}
    for spec in cfg.algorithms:
        errs = convergence_curves(spec, tasks)
        mean, std = errs.mean(axis=1), errs.std(axis=1)
        rows += [(spec.name, k, m, s) for k, (m, s) in enumerate(zip(mean, std))]
        curves[spec.name] = (np.arange(len(mean)), mean)
        summary[spec.name] = {"final_mean_rel_err": float(mean[-1])}
    write_csv(out / "convergence.csv", ["algo", "step", "mean_rel_err", "std_rel_err"], rows)
    write_text(out / "convergence.svg", curves_svg(curves, "mean relative error vs step"))
    first = tasks[0]
    prefix_x, prefix_y = first.xs[:first.n_examples], first.ys[:first.n_examples]
    traces = []
    for spec in cfg.algorithms:
        trace = run_solver(spec.solver, prefix_x, prefix_y)
        traces.append(dataclasses.replace(trace, algo=spec.name))
    write_text(out / "traces.csv", trace_csv(traces))
    return ReportBundle(out, ["convergence.csv", "convergence.svg", "traces.csv"], summary)


def pre_plateau(best: np.ndarray, warmup: int = 0) -> np.ndarray:
    """Indices of p_a whose best match is at least ``warmup`` and strictly
    below the curve's terminal value (the converged plateau)."""
    best = np.asarray(best)
    return np.nonzero((best >= warmup) & (best < best[-1]))[0]


def trend_fit(matrix: SimilarityMatrix, warmup: int = 0) -> dict:
    steps_a = np.asarray(matrix.steps_a, dtype=np.float64)
    best = matrix.best_match_steps().astype(np.float64)
    idx = pre_plateau(best, warmup)
    result = {"points": int(idx.size), "lo": None, "hi": None, "r2_linear": float("nan"), "r2_log": float("nan"),
              "slope_linear": float("nan"), "slope_log": float("nan")}
    if idx.size >= 3:
        result["lo"], result["hi"] = int(steps_a[idx[0]]), int(steps_a[idx[-1]])
        _, slope, r2 = fit_line(steps_a[idx], best[idx])
        result["slope_linear"], result["r2_linear"] = slope, r2
        positive = idx[best[idx] > 0]
        if positive.size >= 3:
            _, slope, r2 = fit_line(steps_a[positive], np.log(best[positive]))
            result["slope_log"], result["r2_log"] = slope, r2
    return result


def similarity_pairs(cfg: ExperimentConfig) -> list[tuple[AlgoSpec, AlgoSpec]]:
    pairs = cfg.options.get("pairs")
    if pairs is None:
        first = cfg.algorithms[0]
        return [(first, other) for other in cfg.algorithms[1:]]
    try:
        return [(cfg.algorithm(a), cfg.algorithm(b)) for a, b in pairs]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad pairs option: {exc}") from exc


def _grid_outputs(out: Path, matrix: SimilarityMatrix, render: bool) -> list[str]:
    stem = f"{safe_name(matrix.algo_a)}_vs_{safe_name(matrix.algo_b)}"
    files = [f"simgrid_{stem}.csv", f"bestmatch_{stem}.csv"]
    write_text(out / files[0], grid_csv(matrix))
    write_text(out / files[1], bestmatch_csv(matrix))
    if render and matrix.grid.size <= SVG_CELL_LIMIT:
        render_heatmap(matrix, out / f"heatmap_{stem}.svg")
        files.append(f"heatmap_{stem}.svg")
    return files


def _run_similarity(cfg: ExperimentConfig, out: Path, handles: dict[str, AlgorithmHandle] | None = None) -> ReportBundle:
    tasks = cfg.tasks()
    metric = cfg.options.get("metric", "errors")
    probes = cfg.options.get("probes")
    warmups = cfg.options.get("warmup", {})
    render = bool(cfg.options.get("render", True))
    files, trend_rows, summary = [], [], {}
    if handles is None:
        pairs = [(a.handle(), b.handle()) for a, b in similarity_pairs(cfg)]
    else:
        pairs = [(h, spec.handle()) for h in handles.values() for spec in cfg.algorithms]
    for a, b in pairs:
        matrix = best_match_matrix(a, b, tasks, metric, probes)
        files += _grid_outputs(out, matrix, render)
        fit = trend_fit(matrix, int(warmups.get(b.id, 0)))
        trend_rows.append((a.id, b.id, fit["points"], fit["lo"] if fit["lo"] is not None else -1,
                           fit["hi"] if fit["hi"] is not None else -1, fit["slope_linear"], fit["r2_linear"],
                           fit["slope_log"], fit["r2_log"]))
        summary[f"{a.id} vs {b.id}"] = {"best_match": [int(x) for x in matrix.best_match_steps()]}
    if cfg.kind == "bestmatch" or handles is not None:
        write_csv(out / "trend.csv", ["algo_a", "algo_b", "points", "p_a_lo", "p_a_hi", "slope_linear", "r2_linear",
                                      "slope_log", "r2_log"], trend_rows)
        files.append("trend.csv")
    return ReportBundle(out, files, summary)


def _run_forgetting(cfg: ExperimentConfig, out: Path) -> ReportBundle:
    tasks = cfg.tasks()
    n_fixed = int(cfg.options.get("n_fixed", 20))
    if n_fixed > cfg.template.n:
        raise ConfigError(f"n_fixed={n_fixed} exceeds task n={cfg.template.n}")
    steps = cfg.options.get("steps", {})
    rows, curves = [], {}
    for spec in cfg.algorithms:
        step = int(steps.get(spec.name, n_steps(spec.solver)))
        curve = forgetting_curve(spec.handle(), step, tasks, n_fixed)
        rows += [(spec.name, g, v) for g, v in enumerate(curve)]
        curves[spec.name] = (np.arange(len(curve)), curve)
    write_csv(out / "forgetting.csv", ["algo", "gap", "mse"], rows)
    write_text(out / "forgetting.svg", curves_svg(curves, "forgetting: MSE vs time-stamp gap"))
    return ReportBundle(out, ["forgetting.csv", "forgetting.svg"], {})


def span_table(spec: AlgoSpec, tasks, steps=None) -> tuple[list[int], np.ndarray]:
    """Worst span residual over the batch for each (step, t): (steps, n)."""
    xs, ys, lengths = prefix_stack(tasks)
    ws = np.stack(list(weight_iterates(spec.solver, xs, ys, lengths)))
    labels = list(range(ws.shape[0]))
    if steps is not None:
        labels = [int(s) for s in steps]
        ws = ws[labels]
    resid = span_residuals(ws, xs)
    return labels, resid.reshape(ws.shape[0], len(tasks), -1).max(axis=1)


def _run_span(cfg: ExperimentConfig, out: Path) -> ReportBundle:
    tasks = cfg.tasks()
    steps = cfg.options.get("steps", {})
    rows, summary = [], {}
    for spec in cfg.algorithms:
        labels, table = span_table(spec, tasks, steps.get(spec.name))
        for step, row in zip(labels, table):
            rows += [(spec.name, step, t + 1, v) for t, v in enumerate(row)]
        summary[spec.name] = {"max_residual": float(table.max())}
    write_csv(out / "span.csv", ["algo", "step", "t", "residual"], rows)
    return ReportBundle(out, ["span.csv"], summary)


def construct_case(task: TaskInstance, k: int, mode: str = GRAM_SCALED, alpha_mode=Safe()) -> dict:
    """Run the Newton program on one task and compare with the solver."""
    n, d = task.n_examples, task.dim
    xs, ys = task.prefix(n)
    s, _ = gram(xs, ys)
    alpha = float(newton_alpha(s, alpha_mode))
    prog_alpha = alpha if mode == GRAM_SCALED else alpha * prompt_columns(n) ** 2
    prog = build_newton_program(d, n, k, prog_alpha, mode)
    pred = run_program(prog, encode_prompt(task, n))
    trace = newton_run(xs, ys, SolverConfig("newton", max(k, 1), alpha_mode=FixedAlpha(alpha)))
    ref = predict(trace, k, task.xs[n])
    return {"layers": prog.n_layers, "width": prog.width, "abs_dev": abs(pred - ref),
            "scaled_dev": abs(pred - ref) / (1.0 + abs(ref))}


def construct_grid(dims, ks, seeds: int, base_seed: int = 0, ns=None, mode: str = GRAM_SCALED,
                   cov: CovSpec = CovSpec(), jobs: int = 1) -> list[dict]:
    """Worst deviation per (d, n, k) over ``seeds`` tasks; default n in {d+1, 2d}."""
    cases = []
    for d in dims:
        for n in (ns[str(d)] if ns and str(d) in ns else sorted({d + 1, 2 * d})):
            cases.append((int(d), int(n)))

    def run(case):
        d, n = case
        tasks = sample_batch(seeds, TaskTemplate(d, n, cov), base_seed)
        rows = []
        for k in ks:
            results = [construct_case(task, int(k), mode) for task in tasks]
            rows.append({"d": d, "n": n, "k": int(k), "layers": results[0]["layers"], "width": results[0]["width"],
                         "max_abs_dev": max(r["abs_dev"] for r in results),
                         "max_scaled_dev": max(r["scaled_dev"] for r in results),
                         "layers_ok": all(r["layers"] == int(k) + 8 for r in results),
                         "width_ok": all(r["width"] <= 4 * d + 2 for r in results)})
        return rows

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        blocks = list(pool.map(run, cases))
    return [row for block in blocks for row in block]


def _run_construct(cfg: ExperimentConfig, out: Path, jobs: int = 1) -> ReportBundle:
    opts = cfg.options.get("construct", {})
    mode = opts.get("mode", GRAM_SCALED)
    if mode not in (GRAM_SCALED, COVARIANCE_SCALED):
        raise ConfigError(f"unknown construction mode {mode!r}")
    tol = float(opts.get("tol", 1e-8))
    rows = construct_grid(opts.get("dims", [cfg.template.dim]), opts.get("ks", list(range(9))),
                          int(opts.get("seeds", cfg.batch)), cfg.base_seed, opts.get("ns"), mode,
                          cfg.template.cov, jobs)
    table = [(r["d"], r["n"], r["k"], r["max_abs_dev"], r["max_scaled_dev"], r["layers"], r["width"]) for r in rows]
    write_csv(out / "construct.csv", ["d", "n", "k", "max_abs_dev", "max_scaled_dev", "layers", "width"], table)
    worst = max(r["max_scaled_dev"] for r in rows)
    ok = worst <= tol and all(r["layers_ok"] and r["width_ok"] for r in rows)
    summary = {"worst_scaled_dev": worst, "tolerance": tol, "passed": ok}
    return ReportBundle(out, ["construct.csv"], summary, ok)


def _run_gen(cfg: ExperimentConfig, out: Path) -> ReportBundle:
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(cfg.tasks(), out / "tasks.jsonl")
    return ReportBundle(out, ["tasks.jsonl"], {"count": cfg.batch})


def run_experiment(cfg: ExperimentConfig, out_dir=None, jobs: int = 1,
                   handles: dict[str, AlgorithmHandle] | None = None) -> ReportBundle:
    """Run one experiment, write its files plus config copy and manifest."""
    out = Path(out_dir if out_dir is not None else cfg.output)
    if cfg.kind == "convergence":
        bundle = _run_convergence(cfg, out)
    elif cfg.kind in ("simgrid", "bestmatch"):
        bundle = _run_similarity(cfg, out, handles)
    elif cfg.kind == "forgetting":
        bundle = _run_forgetting(cfg, out)
    elif cfg.kind == "span":
        bundle = _run_span(cfg, out)
    elif cfg.kind == "construct":
        bundle = _run_construct(cfg, out, jobs)
    else:
        bundle = _run_gen(cfg, out)
    raw = dict(cfg.raw)
    raw.pop("output", None)  # the bundle location is not part of the experiment's identity
    write_manifest(out, raw, bundle.files, _jsonable(bundle.summary))
    return bundle


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj
