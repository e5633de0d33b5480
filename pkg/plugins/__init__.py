"""
BRWRE Statistic Plugins
Per-time observables computed on every occupancy state
"""

from typing import List, Type
from brwre_core import StatPlugin

# Import all plugins
try:
    from .population import PopulationStatsPlugin
except ImportError:
    PopulationStatsPlugin = None

try:
    from .density import DensityStatsPlugin
except ImportError:
    DensityStatsPlugin = None

try:
    from .y_statistics import YStatisticsPlugin
except ImportError:
    YStatisticsPlugin = None

try:
    from .clt_moments import CltMomentsPlugin
except ImportError:
    CltMomentsPlugin = None

try:
    from .cosine_spot_check import CosineSpotCheckPlugin
except ImportError:
    CosineSpotCheckPlugin = None


def get_available_plugins() -> List[Type[StatPlugin]]:
    """Get list of all available plugin classes, in column order."""
    plugins = []

    if PopulationStatsPlugin:
        plugins.append(PopulationStatsPlugin)
    if DensityStatsPlugin:
        plugins.append(DensityStatsPlugin)
    if YStatisticsPlugin:
        plugins.append(YStatisticsPlugin)
    if CltMomentsPlugin:
        plugins.append(CltMomentsPlugin)
    if CosineSpotCheckPlugin:
        plugins.append(CosineSpotCheckPlugin)

    return plugins


__all__ = [
    'PopulationStatsPlugin',
    'DensityStatsPlugin',
    'YStatisticsPlugin',
    'CltMomentsPlugin',
    'CosineSpotCheckPlugin',
    'get_available_plugins'
]
