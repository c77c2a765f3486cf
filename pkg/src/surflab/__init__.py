"""Symplectic flows on closed surfaces with a prescribed set of fixed points.

Subpackages:

* :mod:`surflab.sp2index`   Conley-Zehnder and mean index of paths in Sp(2)
* :mod:`surflab.novikov`    Novikov series, Fox-calculus complex and Novikov ranks
* :mod:`surflab.localfields` planar Hamiltonians, zeros and Poincare indices
* :mod:`surflab.atlas`      chart atlases of the glued surfaces, blow-up and gluing
* :mod:`surflab.dynamics`   integration, flux, return maps and periodic-orbit search
* :mod:`surflab.cli`        the ``lab`` command line tool
"""

__version__ = "0.1.0"
