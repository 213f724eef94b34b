"""Finite-part Riesz operators, Gauss variational problems and discrete energies on closed manifolds."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"

from .geometry import Circle, Component, ConfigurationError, Ellipse, Grid, ManifoldSpec, Sphere, Torus
from .fpquad import KernelSpec, NumericalError, assemble_D, assemble_P, assemble_punched, assemble_V

__all__ = ["Circle", "Component", "ConfigurationError", "Ellipse", "Grid", "ManifoldSpec", "Sphere",
           "Torus", "KernelSpec", "NumericalError", "assemble_D", "assemble_P", "assemble_punched",
           "assemble_V", "__version__"]
