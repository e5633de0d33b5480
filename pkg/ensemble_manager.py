#!/usr/bin/env python3
"""
╔═══════════════════════════════════════════════════════════════════════════════╗
║                           Ensemble Manager                                    ║
║            Independent replicas, process pool, cross-replica summary          ║
╚═══════════════════════════════════════════════════════════════════════════════╝

Runs many trajectories of one configuration. Replica i gets its own
environment seed and particle seed, spawned from (env_seed, particle_seed),
so results do not depend on how replicas are spread over workers.
"""

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from brwre_core import BrwreError, OutputError, RunConfig
from brwre_env import EnvironmentModel
from brwre_sim import run_trajectory
from brwre_stats import EXTINCT, EnsembleSummary, summarize_ensemble

logger = logging.getLogger(__name__)

THREADS_ENV = "BRWRE_THREADS"


def resolve_workers(requested: Optional[int], replicas: int) -> int:
    """Worker count: requested (or CPU count), capped by BRWRE_THREADS and replicas."""
    workers = requested or os.cpu_count() or 1
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            workers = min(workers, max(int(cap), 1))
        except ValueError:
            logger.warning(f"Ignoring non-integer {THREADS_ENV}={cap!r}")
    return max(1, min(workers, replicas))


def replica_seeds(env_seed: int, particle_seed: int, replicas: int) -> List[Tuple[int, int]]:
    """(environment seed, particle seed) per replica."""
    children = np.random.SeedSequence([env_seed, particle_seed]).spawn(replicas)
    return [tuple(int(v) for v in child.generate_state(2, dtype=np.uint64)) for child in children]


def _run_replica(args: Tuple[int, dict, Optional[dict]]) -> Dict[str, Any]:
    """Worker entry point; must stay importable at module level."""
    index, config_data, stats_config = args
    config = RunConfig.from_dict(config_data)
    try:
        result = run_trajectory(config, stats_config)
    except Exception as e:
        return {
            "replica": index,
            "frame": None,
            "approx_sampling": False,
            "failure": {"replica": index, "error": type(e).__name__, "message": str(e)},
        }

    frame = result.to_frame()
    if len(frame) < config.horizon + 1:
        pad = frame.iloc[[-1] * (config.horizon + 1 - len(frame))].reset_index(drop=True)
        pad['t'] = np.arange(len(frame), config.horizon + 1)
        pad['status'] = EXTINCT
        frame = pd.concat([frame, pad], ignore_index=True)
    frame.insert(0, 'replica', index)
    return {"replica": index, "frame": frame, "approx_sampling": result.approx_sampling, "failure": None}


# ═══════════════════════════════════════════════════════════════════════════════
# ENSEMBLE MANAGER
# ═══════════════════════════════════════════════════════════════════════════════

class EnsembleManager:
    """
    Runs the replicas of one configuration and keeps their records.

    Failed replicas are collected, not raised; they are left out of the
    summary statistics.
    """

    def __init__(self, config: RunConfig, stats_config: Optional[dict] = None, workers: Optional[int] = None):
        """
        Initialize ensemble manager.

        Args:
            config: Base run configuration; replicas and seeds come from it
            stats_config: Statistic plugin configuration
            workers: Process count; defaults to config.workers, then CPU count
        """
        if isinstance(config.environment, EnvironmentModel):
            config = replace(config, environment=config.environment.to_dict())
        self.config = config.validate()
        self.stats_config = stats_config
        self.workers = resolve_workers(workers or config.workers, config.replicas)
        self.seeds = replica_seeds(config.env_seed, config.particle_seed, config.replicas)
        self.frame: Optional[pd.DataFrame] = None
        self.summary: Optional[EnsembleSummary] = None
        self.failures: List[Dict[str, Any]] = []
        self.approx_sampling = False
        logger.info(f"EnsembleManager: {config.replicas} replicas on {self.workers} workers")

    def _jobs(self) -> List[Tuple[int, dict, Optional[dict]]]:
        jobs = []
        for i, (env_seed, particle_seed) in enumerate(self.seeds):
            replica = replace(self.config, env_seed=env_seed, particle_seed=particle_seed, replicas=1)
            jobs.append((i, replica.to_dict(), self.stats_config))
        return jobs

    def run(self) -> EnsembleSummary:
        """Run every replica and summarize."""
        jobs = self._jobs()
        if self.workers == 1:
            results = [_run_replica(job) for job in jobs]
        else:
            with ProcessPoolExecutor(max_workers=self.workers) as pool:
                results = list(pool.map(_run_replica, jobs, chunksize=max(1, len(jobs) // (4 * self.workers))))

        frames = []
        self.failures = []
        for result in sorted(results, key=lambda r: r["replica"]):
            if result["failure"]:
                logger.error(f"Replica {result['replica']} failed: {result['failure']['message']}")
                self.failures.append(result["failure"])
                continue
            frames.append(result["frame"])
            self.approx_sampling = self.approx_sampling or result["approx_sampling"]

        if not frames:
            raise BrwreError(f"All {len(jobs)} replicas failed")
        self.frame = pd.concat(frames, ignore_index=True)
        self.summary = summarize_ensemble(
            self.frame, self.config.replicas, failures=self.failures, approx_sampling=self.approx_sampling
        )
        logger.info(f"Ensemble finished: {len(frames)} ok, {len(self.failures)} failed")
        return self.summary

    def save(self, path: Path) -> None:
        """
        Save the summary as JSON.

        Raises:
            OutputError: If nothing has been run or the file cannot be written
        """
        if self.summary is None:
            raise OutputError(Path(path), "no ensemble has been run")
        try:
            with open(path, 'w', encoding='utf-8') as f:
                json.dump(self.summary.to_dict(), f, indent=2, sort_keys=True)
        except OSError as e:
            raise OutputError(Path(path), str(e)) from e
        logger.debug(f"Saved ensemble summary to {path}")

    @staticmethod
    def load(path: Path) -> dict:
        """Load a saved summary."""
        try:
            with open(path, 'r', encoding='utf-8') as f:
                return json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise OutputError(Path(path), str(e)) from e

    def get_stats(self) -> dict:
        """
        Get statistics about the last run.

        Returns:
            Dictionary with replica counts and final survival
        """
        completed = 0 if self.frame is None else int(self.frame['replica'].nunique())
        survival = None
        if self.summary is not None:
            survival = float(self.summary.survival.iloc[-1])
        return {
            "replicas": self.config.replicas,
            "completed": completed,
            "failed": len(self.failures),
            "workers": self.workers,
            "final_survival": survival,
            "approx_sampling": self.approx_sampling,
        }


def run_ensemble(
    config: RunConfig,
    stats_config: Optional[dict] = None,
    workers: Optional[int] = None,
) -> Tuple[EnsembleSummary, pd.DataFrame]:
    """Run an ensemble and return its summary with the long replica frame."""
    manager = EnsembleManager(config, stats_config, workers)
    summary = manager.run()
    return summary, manager.frame


__all__ = [
    'EnsembleManager',
    'run_ensemble',
    'resolve_workers',
    'replica_seeds',
]
