#!/usr/bin/env python3
"""
Density Statistics Plugin
Priority: HIGH

Largest site density rho_star and replica overlap R_t = sum_x rho_t(x)^2.
Both are zero once the population is extinct.
"""

from typing import Any, Dict, List, Optional

from brwre_core import StatContext, StatPlugin, StatPriority
from brwre_stats import density_stats


class DensityStatsPlugin(StatPlugin):
    """Fills rho_star and R_t."""

    def __init__(self, config: Optional[Dict[str, Any]] = None):
        super().__init__(config)
        self._name = "DensityStats"
        self._priority = StatPriority.HIGH
        self._version = "1.0.0"

    def initialize(self, context: StatContext) -> bool:
        return True

    def columns(self) -> List[str]:
        return ['rho_star', 'R_t']

    def process(self, record, state, context):
        stats = density_stats(state)
        record.set('rho_star', float(stats.rho_star))
        record.set('R_t', float(stats.R_t))
        return record
