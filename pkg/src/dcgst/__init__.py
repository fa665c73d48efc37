"""Distribution-consistent graph self-training on sparse-label graphs."""

from dcgst.errors import (
    DcgstError,
    DegenerateWeightError,
    EmptyMaskError,
    IngestError,
    ShapeError,
    SplitError,
)
from dcgst.graphdata import Graph, Split, load_graph, make_split, normalized_adjacency

__version__ = "0.1.0"

__all__ = [
    "DcgstError",
    "DegenerateWeightError",
    "EmptyMaskError",
    "IngestError",
    "ShapeError",
    "SplitError",
    "Graph",
    "Split",
    "load_graph",
    "make_split",
    "normalized_adjacency",
]
