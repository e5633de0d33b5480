#!/usr/bin/env python3
"""
Y Statistics Plugin
Priority: MEDIUM

Polynomial martingales Y_n(t) = sum_x W_n(t, x) Nbar_{t,x} for the
configured multi-indices. The W_n are built once, at initialization.
"""

import logging
from typing import Any, Dict, List, Optional

from brwre_core import StatContext, StatPlugin, StatPriority, index_label, pad_index
from brwre_kernels import DEFAULT_WN_CAP, PolynomialWn, wn_coefficients
from brwre_stats import y_statistic

logger = logging.getLogger(__name__)


class YStatisticsPlugin(StatPlugin):
    """Fills one Y_<n> column per multi-index."""

    def __init__(self, config: Optional[Dict[str, Any]] = None):
        super().__init__(config)
        self._name = "YStatistics"
        self._priority = StatPriority.MEDIUM
        self._version = "1.0.0"

        self.indices = self.config.get('indices', [[2]])
        self.cap = self.config.get('cap', DEFAULT_WN_CAP)
        self.polynomials: List[PolynomialWn] = []

    def initialize(self, context: StatContext) -> bool:
        self.polynomials = [
            wn_coefficients(pad_index(n, context.d), context.d, cap=self.cap) for n in self.indices
        ]
        logger.info(f"Y statistics for {[p.n for p in self.polynomials]}")
        return True

    def columns(self) -> List[str]:
        return [f'Y_{index_label(p.n)}' for p in self.polynomials]

    def process(self, record, state, context):
        for poly in self.polynomials:
            record.set(f'Y_{index_label(poly.n)}', y_statistic(state, poly, context.m))
        return record
