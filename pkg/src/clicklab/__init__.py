"""Click-model simulation, counterfactual relevance estimation and click-model fitting."""
from .core import ClickLog, LoggingPolicy, Ranking, RankWeights, RelevanceTable
from .behavior import AffineBehavior, CascadeBehavior, PlackettLuceBehavior
from .config import Scenario, load_scenario, loads_scenario

__all__ = [
    "AffineBehavior", "CascadeBehavior", "ClickLog", "LoggingPolicy", "PlackettLuceBehavior",
    "Ranking", "RankWeights", "RelevanceTable", "Scenario", "load_scenario", "loads_scenario",
]
