"""Map-free 3D object localization over a posed RGB-D keyframe memory.

Scenes are stored as keyframes selected by pose thresholds; queries are
answered by exact embedding retrieval, optional VLM re-ranking, and
on-demand multi-view 3D fusion; localized goals can be validated in a
deterministic grid-world navigation simulator.
"""

__version__ = "0.1.0"
