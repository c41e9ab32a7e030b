"""Wind-guided patch reordering and terrain-aware attention, desk scale.

Submodules are imported explicitly (`from topoflow import model`) rather
than re-exported here, so the command-line entry point can configure
thread caps before the numeric stack loads.
"""

__version__ = "0.1.0"
