"""courierlab: a grid-courier world-modeling laboratory.

Generates a compositional grid-game benchmark with text manuals, trains
and compares manual-conditioned world-model variants, evaluates
simulation fidelity, runs imagination-based imitation learning, and
serves an interactive plan-review API.
"""

__version__ = "0.1.0"
