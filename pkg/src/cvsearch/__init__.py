"""Training-free visual search for high-resolution question answering."""

from .core import FeatureGrid, Rect, SearchConfig, SearchTrace, TargetSet
from .errors import CVSearchError
from .orchestrator import Outcome, run
from .patching import AdaptiveTree, build_tree, select_k
from .search import SearchResult, bottom_up_search

__version__ = "0.1.0"

__all__ = [
    "AdaptiveTree",
    "CVSearchError",
    "FeatureGrid",
    "Outcome",
    "Rect",
    "SearchConfig",
    "SearchResult",
    "SearchTrace",
    "TargetSet",
    "bottom_up_search",
    "build_tree",
    "run",
    "select_k",
]
