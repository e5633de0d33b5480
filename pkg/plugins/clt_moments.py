#!/usr/bin/env python3
"""
CLT Moments Plugin
Priority: MEDIUM

Moment functionals sum_x (x / sqrt(t))^n Nbar_{t,x} (columns M_<n>) and,
optionally, their density-normalized versions sum_x (x / sqrt(t))^n rho_t(x)
(columns Mrho_<n>). At t = 0 every particle sits at the origin, so moments
with |n| >= 1 are 0 there.
"""

import logging
from typing import Any, Dict, List, Optional

from brwre_core import StatContext, StatPlugin, StatPriority, index_label, pad_index
from brwre_stats import clt_moment, normalized_population

logger = logging.getLogger(__name__)


class CltMomentsPlugin(StatPlugin):
    """Fills M_<n> and Mrho_<n> columns."""

    def __init__(self, config: Optional[Dict[str, Any]] = None):
        super().__init__(config)
        self._name = "CltMoments"
        self._priority = StatPriority.MEDIUM
        self._version = "1.0.0"

        self.indices = self.config.get('indices', [[2]])
        self.density_normalized = self.config.get('density_normalized', True)
        self._labels: List[str] = []

    def initialize(self, context: StatContext) -> bool:
        self.indices = [tuple(int(v) for v in pad_index(n, context.d)) for n in self.indices]
        self._labels = [index_label(n) for n in self.indices]
        logger.info(f"CLT moments for {self.indices}, density-normalized: {self.density_normalized}")
        return True

    def columns(self) -> List[str]:
        cols = [f'M_{label}' for label in self._labels]
        if self.density_normalized:
            cols += [f'Mrho_{label}' for label in self._labels]
        return cols

    def process(self, record, state, context):
        nbar = normalized_population(state, context.m)
        for n, label in zip(self.indices, self._labels):
            if state.t == 0:
                value = nbar if sum(n) == 0 else 0.0
            else:
                value = clt_moment(state, n, context.m)
            record.set(f'M_{label}', value)
            if self.density_normalized:
                record.set(f'Mrho_{label}', value / nbar if nbar > 0 else 0.0)
        return record
