import logging
import math
import time
from typing import Any, Callable, Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from app.brw.analysis import (
    TailKind,
    conjecture_ratio,
    fit_tail,
    naive_tail_estimate,
    top_decades_range,
)
from app.brw.engine import KillConfig, simulate_replicas, snapshots_frame, summarize
from app.brw.errors import ConfigError, TailFitError
from app.brw.model import ModelSpec, Regime, biggins_derivative, biggins_transform, model_hash
from app.brw.parallel import replica_rng, stage_tag
from app.brw.perpetuity import excursion_anatomy, perpetuity_samples, probe_exponential_moment
from app.brw.spine import additive_spine_estimate, default_y_grid, is_tail_estimate
from app.brw.walk import RenewalTable, estimate_renewal, harmonicity_residuals, step_law
from app.harness.config import ExperimentConfig, ModelBlock, config_hash
from app.harness.exporter import CSV_SCHEMA_VERSION, ExporterTool
from app.harness.store import load_renewal, renewal_key, save_renewal

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

TOOL_VERSION = "0.1.0"
IS_TAIL_COLUMNS = ["y", "estimate", "SE", "ESS", "naive_estimate", "naive_SE"]


class StageResult(BaseModel):
    stage: str
    ok: bool
    message: str = ""
    outputs: Dict[str, str] = Field(default_factory=dict)
    summary: Dict[str, Any] = Field(default_factory=dict)
    seconds: float = 0.0


class RunManifest(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    config_hash: str
    model_hash: str
    renewal_hash: str | None = None
    seed: int
    stage_seeds: Dict[str, int] = Field(default_factory=dict)
    tool_version: str = TOOL_VERSION
    csv_schema_version: int = CSV_SCHEMA_VERSION
    wall_clock: Dict[str, float] = Field(default_factory=dict)
    certificates: Dict[str, float] = Field(default_factory=dict)
    config: Dict[str, Any] = Field(default_factory=dict)


class PhiRow(BaseModel):
    theta: float
    phi: float
    phi_prime: float


class PhiReport(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    model: ModelSpec
    model_hash: str
    residuals: Dict[str, float]
    rows: List[PhiRow]


def phi_report(block: ModelBlock, thetas: Sequence[float]) -> PhiReport:
    """Calibrate a model block and tabulate Phi and Phi' over ``thetas``.

    Raises:
        CalibrationError: If the block cannot be calibrated.
    """
    model = block.build()
    rows = [
        PhiRow(theta=t, phi=biggins_transform(model, t), phi_prime=biggins_derivative(model, t))
        for t in thetas
    ]
    residuals = {
        "phi_1": biggins_transform(model, 1.0),
        "phi_prime_1": biggins_derivative(model, 1.0),
    }
    if model.kappa is not None and math.isfinite(model.kappa):
        residuals["phi_kappa"] = biggins_transform(model, model.kappa)
    return PhiReport(model=model, model_hash=model_hash(model), residuals=residuals, rows=rows)


class ExperimentRunner:
    """Runs the stages of one experiment config and writes their artifacts.

    Every stage records its stream tag and wall-clock time in the manifest,
    which is rewritten to ``<output_dir>/manifest.json`` after each stage.
    """

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.model: ModelSpec = config.model.build()
        self.exporter = ExporterTool()
        self.manifest = RunManifest(
            config_hash=config_hash(config),
            model_hash=model_hash(self.model),
            seed=config.seed,
            config=config.model_dump(mode="json"),
        )
        self._renewal: RenewalTable | None = None

    @property
    def output_dir(self) -> str:
        return self.config.output_dir

    def _record(self, stage: str, seconds: float) -> None:
        self.manifest.stage_seeds[stage] = stage_tag(stage)
        self.manifest.wall_clock[stage] = seconds
        self.exporter.export_json(self.manifest, self.output_dir, "manifest")

    def run_stage(self, stage: str, action: Callable[[], Tuple[Dict[str, str], Dict[str, Any]]]) -> StageResult:
        """Run one stage; any error becomes a failed StageResult naming the stage."""
        logger.info(f"Stage {stage} started")
        start = time.perf_counter()
        try:
            outputs, summary = action()
        except (ValueError, RuntimeError, OSError) as e:
            logger.error(f"Stage {stage} failed: {e}")
            return StageResult(stage=stage, ok=False, message=f"{stage}: {e}",
                               seconds=time.perf_counter() - start)
        except Exception as e:
            logger.error(f"Stage {stage} failed unexpectedly: {e}")
            return StageResult(stage=stage, ok=False, message=f"{stage}: unexpected error: {e}",
                               seconds=time.perf_counter() - start)
        seconds = time.perf_counter() - start
        self._record(stage, seconds)
        logger.info(f"Stage {stage} finished in {seconds:.1f}s")
        return StageResult(stage=stage, ok=True, outputs=outputs, summary=summary, seconds=seconds)

    # --- renewal ---

    def renewal(self) -> RenewalTable:
        """Renewal table for the configured model, reused from the store when cached."""
        if self._renewal is not None:
            return self._renewal
        walk = self.config.walk
        engine = self.config.engine
        u_max = max(walk.u_max, max(engine.xs) + engine.v_offset)
        params = walk.model_dump(mode="json")
        params["u_max"] = u_max
        key = renewal_key(self.manifest.model_hash, params)
        cached = load_renewal(self.output_dir, key)
        if cached is not None:
            table, digest = cached
            logger.info(f"Reusing renewal table {key}")
        else:
            table = estimate_renewal(
                step_law(self.model), u_max, walk.replicas,
                replica_rng(self.config.seed, "renewal", 0),
                spacing=walk.spacing, step_cap=walk.step_cap, method=walk.method,
            )
            digest = save_renewal(self.output_dir, key, table, {"model_hash": self.manifest.model_hash})
        self.manifest.renewal_hash = digest
        self._renewal = table
        return table

    def _renewal_stage(self) -> Tuple[Dict[str, str], Dict[str, Any]]:
        table = self.renewal()
        check = harmonicity_residuals(
            table, step_law(self.model), replica_rng(self.config.seed, "harmonicity", 0),
            samples=self.config.walk.harmonicity_samples,
        )
        outputs = {
            "renewal": self.exporter.export_csv(table.to_frame(), self.output_dir, "renewal"),
            "harmonicity": self.exporter.export_csv(check, self.output_dir, "harmonicity"),
        }
        summary = {
            "exact": table.exact, "nodes": int(table.grid.size), "slope": table.slope,
            "max_residual": float(check["residual"].max()), "harmonic": bool(check["ok"].all()),
        }
        return outputs, summary

    def run_renewal(self) -> StageResult:
        return self.run_stage("renewal", self._renewal_stage)

    # --- engine ---

    def kill_configs(self) -> List[KillConfig]:
        engine = self.config.engine
        if not engine.killing:
            return [KillConfig(math.inf, engine.n, v_cap=engine.v_offset, node_budget=engine.node_budget)]
        return [
            KillConfig(x, engine.n, v_cap=x + engine.v_offset, node_budget=engine.node_budget)
            for x in engine.xs
        ]

    def engine_samples(self, cfg: KillConfig, replicas: int | None = None) -> Tuple[list, int]:
        replicas = self.config.engine.replicas if replicas is None else replicas
        return simulate_replicas(
            self.model, self.renewal() if cfg.killing else None, cfg, replicas, self.config.seed,
            self.config.workers, stage=f"engine-{cfg.x:g}",
        )

    def _simulate_stage(self) -> Tuple[Dict[str, str], Dict[str, Any]]:
        frames, summaries = [], []
        for cfg in self.kill_configs():
            snapshots, discarded = self.engine_samples(cfg)
            if not snapshots:
                raise RuntimeError(f"Every replica at x = {cfg.x:g} exceeded the node budget")
            frames.append(snapshots_frame(snapshots))
            summary = summarize(snapshots, self.renewal() if cfg.killing else None, cfg, discarded)
            self.manifest.certificates[f"engine-{cfg.x:g}"] = summary.certificate_relative
            summaries.append(summary.model_dump(mode="json"))
            logger.info(
                f"x = {cfg.x:g}: W identity {summary.w_identity_holds}, "
                f"D identity {summary.d_identity_holds}, certificate {summary.certificate_relative:.2e}"
            )
        frame = pd.concat(frames, ignore_index=True)
        outputs = {
            "snapshots": self.exporter.export_csv(frame, self.output_dir, "snapshots"),
            "summary": self.exporter.export_json({"summaries": summaries}, self.output_dir, "summary"),
        }
        return outputs, {"summaries": summaries}

    def run_simulate(self) -> StageResult:
        return self.run_stage("simulate", self._simulate_stage)

    # --- spine ---

    def _is_frame(self, cfg: KillConfig, ys: np.ndarray) -> pd.DataFrame:
        spine = self.config.spine
        if self.model.regime is Regime.BOUNDARY:
            return is_tail_estimate(self.model, self.renewal(), cfg, ys, spine.replicas,
                                    self.config.seed, self.config.workers)
        return additive_spine_estimate(self.model, cfg, ys, spine.replicas,
                                       self.config.seed, self.config.workers)

    def _spine_stage(self) -> Tuple[Dict[str, str], Dict[str, Any]]:
        if not self.config.engine.killing:
            raise ConfigError("spine-tail needs a killed engine block")
        column = "D_trunc" if self.model.regime is Regime.BOUNDARY else "W_trunc"
        outputs, summary = {}, {}
        for cfg in self.kill_configs():
            snapshots, _ = self.engine_samples(cfg)
            naive = snapshots_frame(snapshots)[column].to_numpy(dtype=float)
            spine = self.config.spine
            ys = np.asarray(spine.y_grid) if spine.y_grid else default_y_grid(naive, spine.y_points)
            estimates = self._is_frame(cfg, ys)
            baseline = naive_tail_estimate(naive, ys)
            frame = pd.DataFrame({
                "y": estimates["y"], "estimate": estimates["estimate"], "SE": estimates["SE"],
                "ESS": estimates["ESS"], "naive_estimate": baseline["estimate"],
                "naive_SE": baseline["SE"],
            }, columns=IS_TAIL_COLUMNS)
            name = f"is_tail_x{cfg.x:g}"
            outputs[name] = self.exporter.export_csv(frame, self.output_dir, name)
            unreliable = int(estimates["unreliable"].sum())
            summary[name] = {"column": column, "points": int(len(frame)), "unreliable": unreliable}
            try:
                analysis = self.config.analysis
                fit = fit_tail(naive, TailKind.EXPONENTIAL, analysis.quantile_range,
                               bootstrap=analysis.bootstrap,
                               rng=replica_rng(self.config.seed, "fit", 0),
                               min_samples=analysis.min_samples)
                summary[name]["naive_fit"] = fit.model_dump(mode="json")
            except TailFitError as e:
                logger.warning(f"Naive tail fit skipped at x = {cfg.x:g}: {e}")
        return outputs, summary

    def run_spine_tail(self) -> StageResult:
        return self.run_stage("spine-tail", self._spine_stage)

    # --- perpetuity ---

    def _perpetuity_stage(self) -> Tuple[Dict[str, str], Dict[str, Any]]:
        block = self.config.perpetuity
        cfg = block.perpetuity_config()
        renewal = self.renewal() if self.model.regime is Regime.BOUNDARY else None
        seed, workers = self.config.seed, self.config.workers
        samples = perpetuity_samples(self.model, renewal, cfg, block.replicas, seed, workers)
        probe = probe_exponential_moment(self.model, renewal, cfg, block.replicas, seed, workers,
                                         starts=block.starts)
        outputs = {
            "perpetuity": self.exporter.export_csv(samples, self.output_dir, "perpetuity"),
            "probe": self.exporter.export_json(probe, self.output_dir, "probe"),
        }
        summary = {
            "epsilon_star": probe.epsilon_star, "max_mgf": probe.max_mgf,
            "converged_fraction": float(samples["converged"].mean()),
        }
        if renewal is not None:
            stats = excursion_anatomy(
                self.model, renewal, block.start_x, block.j_max, block.excursion_replicas,
                replica_rng(seed, "excursions", 0), horizon=block.horizon, q_kind=block.q_kind,
            )
            outputs["excursions"] = self.exporter.export_csv(stats.level_rows(), self.output_dir, "excursions")
        return outputs, summary

    def run_perpetuity(self) -> StageResult:
        return self.run_stage("perpetuity", self._perpetuity_stage)

    # --- exploratory ratio ---

    def _conjecture_stage(self, y: float) -> Tuple[Dict[str, str], Dict[str, Any]]:
        if y <= 0:
            raise ValueError("y must be positive")
        engine = self.config.engine
        rate = self.model.kappa if self.model.regime is Regime.SUBCRITICAL else 1.0
        xs = sorted(set([0.0] + list(engine.xs)))
        rows = []
        for x in xs:
            cfg = KillConfig(x, engine.n, v_cap=x + engine.v_offset, node_budget=engine.node_budget)
            row = self._is_frame(cfg, np.array([y])).iloc[0]
            rows.append({"x": x, "estimate": float(row["estimate"]), "SE": float(row["SE"])})
        base = rows[0]
        for row in rows:
            ratio, se = conjecture_ratio(row["estimate"], row["SE"], base["estimate"], base["SE"], row["x"], rate)
            row["ratio"], row["ratio_SE"] = ratio, se
        frame = pd.DataFrame(rows, columns=["x", "estimate", "SE", "ratio", "ratio_SE"])
        outputs = {"conjecture": self.exporter.export_csv(frame, self.output_dir, "conjecture")}
        return outputs, {"y": y, "rate": rate}

    def run_conjecture(self, y: float) -> StageResult:
        return self.run_stage("explore-conjecture", lambda: self._conjecture_stage(y))


def run_fit(
    input_path: str,
    column: str,
    kind: TailKind | str,
    output_dir: str,
    quantile_range: Tuple[float, float] | None = None,
    bootstrap: int = 200,
    seed: int = 0,
    min_samples: int = 10_000,
) -> StageResult:
    """Fit the tail of one CSV column and write ``fit.json``.

    Nothing is written unless the fit succeeds.
    """
    exporter = ExporterTool()
    start = time.perf_counter()
    try:
        samples = exporter.read_samples(input_path, column)
        if quantile_range is None:
            quantile_range = top_decades_range(samples)
        fit = fit_tail(samples, kind, quantile_range, bootstrap=bootstrap,
                       rng=replica_rng(seed, "fit", 0), min_samples=min_samples)
        path = exporter.export_json(fit, output_dir, "fit")
    except (ValueError, RuntimeError, OSError) as e:
        logger.error(f"Stage fit failed: {e}")
        return StageResult(stage="fit", ok=False, message=f"fit: {e}",
                           seconds=time.perf_counter() - start)
    return StageResult(stage="fit", ok=True, outputs={"fit": path},
                       summary=fit.model_dump(mode="json"), seconds=time.perf_counter() - start)
