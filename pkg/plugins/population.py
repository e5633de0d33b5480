#!/usr/bin/env python3
"""
Population Statistics Plugin
Priority: CRITICAL

Total population N_t and its normalization N_t / m^t.
"""

import logging
from typing import Any, Dict, List, Optional

from brwre_core import StatContext, StatPlugin, StatPriority
from brwre_stats import normalized_population

logger = logging.getLogger(__name__)


class PopulationStatsPlugin(StatPlugin):
    """Fills N_t and Nbar_t."""

    def __init__(self, config: Optional[Dict[str, Any]] = None):
        super().__init__(config)
        self._name = "PopulationStats"
        self._priority = StatPriority.CRITICAL
        self._version = "1.0.0"

    def initialize(self, context: StatContext) -> bool:
        if context.m <= 0:
            logger.warning("Mean offspring is zero; Nbar_t is 0 after t = 0")
        return True

    def columns(self) -> List[str]:
        return ['N_t', 'Nbar_t']

    def process(self, record, state, context):
        record.set('N_t', state.total)
        record.set('Nbar_t', normalized_population(state, context.m))
        return record
