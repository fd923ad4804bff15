"""Numerical laboratory for convex-integration constructions in a
heat-conducting compressible gas on the flat torus."""

__version__ = "0.1.0"
