"""Light-field reconstruction from a single coded image.

Pipeline: simulate the coded capture of a 4-D light field, reconstruct
the center view, estimate a disparity map without disparity labels via
photo-consistency, warp the center view to every angular position, and
refocus the result. Every numerical component is verifiable against an
independent oracle; see the tests and the `codedlf` CLI.
"""

__version__ = "0.1.0"
