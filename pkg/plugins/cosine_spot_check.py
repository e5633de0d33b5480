#!/usr/bin/env python3
"""
Cosine Spot Check Plugin
Priority: LOW

Bounded test function: sum_x cos(omega . x / sqrt(t)) rho_t(x) for each
configured frequency. Columns cos_0, cos_1, ... follow the frequency order.
"""

from typing import Any, Dict, List, Optional

from brwre_core import StatContext, StatPlugin, StatPriority, pad_index
from brwre_stats import cosine_statistic


class CosineSpotCheckPlugin(StatPlugin):
    """Fills cos_<k> columns."""

    def __init__(self, config: Optional[Dict[str, Any]] = None):
        super().__init__(config)
        self._name = "CosineSpotCheck"
        self._priority = StatPriority.LOW
        self._version = "1.0.0"

        self.frequencies = self.config.get('frequencies', [[1.0]])

    def initialize(self, context: StatContext) -> bool:
        self.frequencies = [tuple(float(w) for w in pad_index(f, context.d, 0.0)) for f in self.frequencies]
        return True

    def columns(self) -> List[str]:
        return [f'cos_{k}' for k in range(len(self.frequencies))]

    def process(self, record, state, context):
        for k, omega in enumerate(self.frequencies):
            record.set(f'cos_{k}', cosine_statistic(state, omega))
        return record
