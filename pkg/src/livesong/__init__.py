"""Live music song identification toolkit.

Trains and serves a pairwise similarity model that, given a live recording,
retrieves the matching studio version from a reference database by scoring
cross-similarity matrices of multi-level deep sequences.
"""

__version__ = "0.1.0"
