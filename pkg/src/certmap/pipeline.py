"""Frame loop tying registration to the certified map, plus figure-data exports.

A run simulates the scenario's camera, registers consecutive frames, feeds the
estimates to the map and, in oracle mode, checks every published distance
against the analytic scene. Outputs (all in the run directory):

- ``trace.csv``: per-frame errors, bounds and violation counts (deterministic)
- ``timings.csv``: per-frame stage timings in milliseconds
- ``summary.json``, ``grid.npz`` and z-slice CSVs
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import cesdf
from .geom import RotoTranslation, quat_to_rotation
from .registration import (
    GncConfig,
    RegistrationError,
    build_pair_graph,
    gnc_tls_rotation,
    load_correspondence_frames,
    register,
    rotation_bound_full,
    rotation_bound_trace,
)
from .scenario import Scenario, load_scenario
from .simworld import SensorNoiseModel, generate_correspondences, relative_motion, render_depth

log = logging.getLogger(__name__)

FIG3_ITERATIONS = (1, 10, 100, 1000, 10000)
FIG5_FRACTIONS = (0.005, 0.01, 0.05, 0.1, 0.5, 1.0)


class StageError(RuntimeError):
    """A frame failed; the message carries the frame index and stage."""


@dataclass
class RunConfig:
    scenario: str | Scenario
    seed: int | None = None
    oracle: bool = False
    out_dir: str | Path | None = None
    fraction: float | None = None
    iterations: int | None = None
    gnc: GncConfig | None = None
    esdf_period_s: float | None = None
    max_frames: int | None = None
    correspondence_file: str | Path | None = None
    slice_z: float | None = None

    def __post_init__(self):
        if self.fraction is not None and not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must be in (0, 1]")
        if self.iterations is not None and self.iterations < 1:
            raise ValueError("iterations must be >= 1")

    def resolve(self) -> Scenario:
        return self.scenario if isinstance(self.scenario, Scenario) else load_scenario(self.scenario)


@dataclass
class FrameTrace:
    k: int
    rre: float
    rte: float
    epsilon_r: float
    epsilon_t: float
    converged: bool
    bound_ok: bool
    violation_count: int
    worst_excess: float
    baseline_violation_count: int  # -1 when the baseline was not checked this frame
    registration_ms: float = 0.0
    deflate_ms: float = 0.0
    integrate_ms: float = 0.0
    reset_ms: float = 0.0
    propagate_ms: float = 0.0
    simulate_ms: float = 0.0
    oracle_ms: float = 0.0
    frame_ms: float = 0.0


TRACE_COLUMNS = (
    "k", "rre", "rte", "epsilon_r", "epsilon_t", "converged", "bound_ok",
    "violation_count", "worst_excess", "baseline_violation_count",
)
TIMING_COLUMNS = (
    "k", "simulate_ms", "registration_ms", "integrate_ms", "deflate_ms", "reset_ms",
    "propagate_ms", "oracle_ms", "frame_ms",
)


@dataclass
class RunSummary:
    scenario: str
    seed: int
    frames: int
    oracle: bool
    rms_rre: float
    rms_rte: float
    rms_epsilon_r: float
    rms_epsilon_t: float
    bound_ratio_r: float
    bound_ratio_t: float
    violations: int
    baseline_violations: int
    bound_failures: int
    unconverged_frames: int
    mean_ms: dict = field(default_factory=dict)
    out_dir: str | None = None

    @property
    def certified(self) -> bool:
        return self.violations == 0 and self.bound_failures == 0


def frame_seeds(master_seed: int, k: int) -> tuple[int, int]:
    """Independent (simulation, registration) seeds for frame ``k``."""
    state = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(k),)).generate_state(2)
    return int(state[0]), int(state[1])


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_csv(path: Path, rows, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(getattr(r, c)) for c in columns])


def _rms(x) -> float:
    x = np.asarray(x, float)
    return float(np.sqrt(np.mean(x * x))) if x.size else float("nan")


def run_scenario(cfg: RunConfig, progress=None) -> tuple[RunSummary, list[FrameTrace]]:
    """Simulate, register and map every frame of a scenario."""
    sc = cfg.resolve()
    seed = sc.seed if cfg.seed is None else int(cfg.seed)
    fraction = cfg.fraction or sc.fraction
    iterations = cfg.iterations or sc.iterations
    gnc = cfg.gnc or sc.gnc
    fps = sc.trajectory.frame_rate
    period = max(1, int(round((cfg.esdf_period_s or sc.grid.esdf_period_s) * fps)))
    n_frames = sc.trajectory.frame_count
    if cfg.max_frames is not None:
        n_frames = min(n_frames, int(cfg.max_frames))
    external = load_correspondence_frames(cfg.correspondence_file) if cfg.correspondence_file else None

    grid = cesdf.VoxelGrid.spanning(sc.grid.lo, sc.grid.hi, sc.grid.resolution)
    # the map frame is anchored at the known starting pose
    state = cesdf.MapState(grid, pose=sc.trajectory.pose(0), esdf_period=period)
    if cfg.oracle:
        state.with_baseline()
    cam = sc.camera
    clock = time.perf_counter
    traces: list[FrameTrace] = []

    def check(tr: FrameTrace, true_pose: RotoTranslation):
        t0 = clock()
        tr.violation_count, tr.worst_excess = cesdf.count_violations(state.grid, state.pose, true_pose, sc.scene)
        if state.baseline is not None and state.due_for_propagation():
            tr.baseline_violation_count = cesdf.count_violations(state.baseline, state.pose, true_pose, sc.scene)[0]
        tr.oracle_ms = 1e3 * (clock() - t0)

    t_frame = clock()
    true_prev = sc.trajectory.pose(0)
    depth = render_depth(sc.scene, cam, true_prev)
    t_sim = clock()
    tr = FrameTrace(0, 0.0, 0.0, 0.0, 0.0, True, True, 0, 0.0, -1, simulate_ms=1e3 * (t_sim - t_frame))
    t0 = clock()
    cesdf.observe_frame(state, depth, cam)
    tr.propagate_ms = 1e3 * (clock() - t0)
    if cfg.oracle:
        check(tr, true_prev)
    tr.frame_ms = 1e3 * (clock() - t_frame)
    traces.append(tr)

    for k in range(1, n_frames):
        t_frame = clock()
        true_k = sc.trajectory.pose(k)
        sim_seed, reg_seed = frame_seeds(seed, k)
        truth = relative_motion(true_prev, true_k)
        if external is not None:
            if k not in external:
                raise StageError(f"frame {k}: correspondence file has no '# frame {k}' block")
            c = external[k]
            outliers = np.zeros(len(c), dtype=bool)
        else:
            try:
                c, truth, outliers = generate_correspondences(
                    sc.scene, cam, true_prev, true_k, sc.features, sc.noise, rng_seed=sim_seed, return_outliers=True
                )
            except Exception as exc:
                raise StageError(f"frame {k}: generate_correspondences: {exc}") from exc
        depth = render_depth(sc.scene, cam, true_k)
        t_sim = clock()
        try:
            reg = register(c, fraction, iterations, gnc, reg_seed)
        except RegistrationError as exc:
            raise StageError(f"frame {k}: {exc}") from exc
        t_reg = clock()
        rre = float(np.linalg.norm(reg.rotation_estimate - truth.rotation))
        rte = float(np.linalg.norm(reg.translation_estimate - truth.translation))
        # outlier frames only promise sound bounds when GNC rejected every outlier
        trusted = reg.converged and not np.any(reg.translation_weights[outliers] >= 0.5)
        bound_ok = (rre <= reg.epsilon_r and rte <= reg.epsilon_t) or not trusted
        timings: dict = {}
        try:
            cesdf.step_frame(state, depth, cam, reg, timings)
        except Exception as exc:
            raise StageError(f"frame {k}: step_frame: {exc}") from exc
        tr = FrameTrace(
            k, rre, rte, reg.epsilon_r, reg.epsilon_t, reg.converged, bound_ok, 0, 0.0, -1,
            registration_ms=1e3 * (t_reg - t_sim), simulate_ms=1e3 * (t_sim - t_frame), **timings,
        )
        if cfg.oracle:
            check(tr, true_k)
        tr.frame_ms = 1e3 * (clock() - t_frame)
        traces.append(tr)
        true_prev = true_k
        if progress is not None:
            progress(tr)
        if tr.violation_count:
            log.warning("frame %d: %d certified-distance violations (worst %.4f m)", k, tr.violation_count, tr.worst_excess)

    body = traces[1:]
    rre = [t.rre for t in body]
    rte = [t.rte for t in body]
    summary = RunSummary(
        scenario=sc.name,
        seed=seed,
        frames=len(traces),
        oracle=cfg.oracle,
        rms_rre=_rms(rre),
        rms_rte=_rms(rte),
        rms_epsilon_r=_rms([t.epsilon_r for t in body]),
        rms_epsilon_t=_rms([t.epsilon_t for t in body]),
        bound_ratio_r=_rms([t.epsilon_r for t in body]) / max(_rms(rre), 1e-300),
        bound_ratio_t=_rms([t.epsilon_t for t in body]) / max(_rms(rte), 1e-300),
        violations=int(sum(t.violation_count for t in traces)),
        baseline_violations=int(sum(max(t.baseline_violation_count, 0) for t in traces)),
        bound_failures=int(sum(not t.bound_ok for t in body)),
        unconverged_frames=int(sum(not t.converged for t in body)),
        mean_ms={c: float(np.mean([getattr(t, c) for t in body])) if body else 0.0 for c in TIMING_COLUMNS[1:]},
    )

    if cfg.out_dir is not None:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        summary.out_dir = str(out)
        _write_csv(out / "trace.csv", traces, TRACE_COLUMNS)
        _write_csv(out / "timings.csv", traces, TIMING_COLUMNS)
        cesdf.save_snapshot(out / "grid.npz", state.grid, {"scenario": sc.name, "frames": len(traces)})
        z = cfg.slice_z if cfg.slice_z is not None else float(sc.trajectory.keyframes[0].position[2])
        cesdf.export_slice(state.grid, z, out / "slice_certified.csv")
        if state.baseline is not None:
            cesdf.export_slice(state.baseline, z, out / "slice_baseline.csv")
        (out / "summary.json").write_text(json.dumps(asdict(summary), indent=2, sort_keys=True) + "\n")
    return summary, traces


# --------------------------------------------------------------------------
# figure data


def _scenario_pairs(sc: Scenario, count: int, rng: np.random.Generator, noise: SensorNoiseModel):
    """``count`` correspondence sets drawn between random consecutive frames of the scenario."""
    out = []
    n = sc.trajectory.frame_count
    while len(out) < count:
        k = int(rng.integers(0, max(n - 1, 1)))
        pose_a, pose_b = sc.trajectory.pose(k), sc.trajectory.pose(k + 1)
        c, truth = generate_correspondences(
            sc.scene, sc.camera, pose_a, pose_b, sc.features, noise, rng_seed=int(rng.integers(2**63))
        )
        out.append((c, truth))
    return out


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def export_fig3_data(scenario, out_path=None, trials: int = 100, seed: int = 0, iterations=FIG3_ITERATIONS):
    """Sampled (3-edge) vs full-graph rotation bounds over increasing sampling budgets.

    Returns ``(rows, per_trial)`` where rows follow the CSV schema and
    ``per_trial`` holds the raw ``(full, sampled-at-each-budget)`` arrays.
    """
    sc = scenario if isinstance(scenario, Scenario) else load_scenario(scenario)
    rng = np.random.default_rng(seed)
    noise = SensorNoiseModel(sc.noise.delta_fraction, sc.noise.delta_floor, 0.0, sc.noise.outlier_magnitude)
    budgets = np.array(sorted(iterations))
    full = np.empty(trials)
    sampled = np.empty((trials, len(budgets)))
    for i, (c, _) in enumerate(_scenario_pairs(sc, trials, rng, noise)):
        g = build_pair_graph(c, sc.fraction, int(rng.integers(2**63)))
        r_hat = quat_to_rotation(gnc_tls_rotation(g, sc.gnc).estimate)
        full[i] = rotation_bound_full(g, r_hat)
        trace = rotation_bound_trace(g, r_hat, int(budgets[-1]), int(rng.integers(2**63)))
        sampled[i] = trace[budgets - 1]
    rows = []
    for j, it in enumerate(budgets):
        l2 = np.percentile(full, [50, 25, 75])
        l3 = np.percentile(sampled[:, j], [50, 25, 75])
        rows.append((int(it), *l2, *l3))
    if out_path is not None:
        _write_rows(
            out_path,
            ("iterations", "lemma2_median", "lemma2_q1", "lemma2_q3", "lemma3_median", "lemma3_q1", "lemma3_q3"),
            rows,
        )
    return rows, (full, sampled)


def export_fig5_data(scenario, out_path=None, frames: int = 20, seed: int = 0, fractions=FIG5_FRACTIONS, repeats: int = 1):
    """Registration time and accuracy as the pair-graph fraction shrinks, on fixed frames."""
    sc = scenario if isinstance(scenario, Scenario) else load_scenario(scenario)
    rng = np.random.default_rng(seed)
    pairs = _scenario_pairs(sc, frames, rng, sc.noise)
    seeds = [int(s) for s in rng.integers(2**63, size=frames)]
    register(pairs[0][0], fractions[0], sc.iterations, sc.gnc, 0)  # warm compiled kernels
    rows = []
    for f in fractions:
        times, errs = [], []
        for (c, truth), s in zip(pairs, seeds):
            best = math.inf
            for _ in range(repeats):
                t0 = time.perf_counter()
                res = register(c, f, sc.iterations, sc.gnc, s)
                best = min(best, time.perf_counter() - t0)
            times.append(1e3 * best)
            errs.append(float(np.linalg.norm(res.rotation_estimate - truth.rotation)))
        rows.append((float(f), float(np.mean(times)), float(np.mean(errs))))
    if out_path is not None:
        _write_rows(out_path, ("fraction", "mean_time_ms", "mean_rre"), rows)
    return rows


def trace_field_names() -> tuple[str, ...]:
    return tuple(f.name for f in fields(FrameTrace))
