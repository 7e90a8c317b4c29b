"""Numerical laboratory for boundary inverse problems of magnetic wave operators.

Modules: :mod:`geometry` (grids, metrics, charts), :mod:`fields` (potentials, gauges, reductions),
:mod:`forward` (time-domain solver), :mod:`dtn` (D-to-N maps and boundary functionals),
:mod:`probes` (geometric-optics probes), :mod:`reconstruct` (near-boundary recovery) and
:mod:`cli` (scenario runner).
"""

from ._accel import backend_name

__version__ = "0.1.0"
__all__ = ["backend_name", "__version__"]
