"""slidefuse: deformation-free fusion of consecutive stained slide sections.

Landmarks (glomeruli) are matched across approximately rigidly registered
serial sections by comparing their local neighbourhood geometry, without
warping any tissue. Matched landmarks link the slides into chains, and
multi-stain features extracted around each chain feed an unsupervised PCA
ranking score.
"""

__version__ = "0.1.0"

from .evaluation import ConfusionCounts, MatchMetrics, evaluate
from .features import (
    FeatureMatrix,
    NeighbourhoodSpec,
    RankScore,
    build_feature_matrix,
    density_inside,
    density_outside,
    mean_distance_to_glomerulus,
    mean_pairwise_distance,
    pca_rank,
)
from .matching import (
    CandidateSet,
    MatchParams,
    assignment_energy,
    chain_matches,
    match_bidirectional,
    match_directed,
    match_landmarks,
    neighbor_energy,
)
from .model import (
    CellMap,
    ChainRow,
    GroundTruthMatches,
    Landmark,
    MatchChain,
    MatchPair,
    MatchSet,
    SlideGraph,
    auto_d_sub,
    build_slide_graph,
)
from .stains import RgbTile, StainMatrix, extract_cells, optical_density, unmix
from .synthetic import SyntheticConfig, generate_pair, run_experiment

__all__ = [
    "__version__",
    "Landmark",
    "SlideGraph",
    "MatchPair",
    "MatchSet",
    "ChainRow",
    "MatchChain",
    "CellMap",
    "GroundTruthMatches",
    "build_slide_graph",
    "auto_d_sub",
    "MatchParams",
    "CandidateSet",
    "neighbor_energy",
    "assignment_energy",
    "match_directed",
    "match_bidirectional",
    "match_landmarks",
    "chain_matches",
    "SyntheticConfig",
    "generate_pair",
    "run_experiment",
    "ConfusionCounts",
    "MatchMetrics",
    "evaluate",
    "StainMatrix",
    "RgbTile",
    "optical_density",
    "unmix",
    "extract_cells",
    "NeighbourhoodSpec",
    "FeatureMatrix",
    "RankScore",
    "density_inside",
    "density_outside",
    "mean_distance_to_glomerulus",
    "mean_pairwise_distance",
    "build_feature_matrix",
    "pca_rank",
]
