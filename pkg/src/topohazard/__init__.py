"""Event-history summaries of topological features.

Nelson-Aalen curves for component births in sublevel filtrations of
lattice fields, and Cox regression for leaf/branch events on embedded
metric trees.
"""

__version__ = "0.1.0"
