"""Dual-arm trajectory optimization with differentiable collision constraints.

Submodules:

* :mod:`trajlib.geometry`  - convex primitives and the minimum scaling factor
* :mod:`trajlib.robot`     - serial-chain models, kinematics and dynamics
* :mod:`trajlib.trajopt`   - direct collocation, solver, validation, Bezier
* :mod:`trajlib.library`   - precomputed motion library with trilinear queries
* :mod:`trajlib.chomp`     - waypoint-based baseline planner
* :mod:`trajlib.scene`     - scene/manifest file formats
* :mod:`trajlib.cli`       - command-line interface
"""

__version__ = "0.1.0"
