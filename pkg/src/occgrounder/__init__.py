"""Open-world 3D semantic occupancy: pseudo-labels, grounding losses, open-world inference and evaluation."""

__version__ = "0.1.0"

from .errors import ConfigError, ContractError, DivergenceError, FeasibilityError, FormatError, OccError, ShapeError
from .voxelcore import IGNORE_ID, GridSpec, LabelSpace, SemanticVoxelGrid, read_grid, write_grid

__all__ = [
    "ConfigError",
    "ContractError",
    "DivergenceError",
    "FeasibilityError",
    "FormatError",
    "GridSpec",
    "IGNORE_ID",
    "LabelSpace",
    "OccError",
    "SemanticVoxelGrid",
    "ShapeError",
    "__version__",
    "read_grid",
    "write_grid",
]
