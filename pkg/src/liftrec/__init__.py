"""Recovery of elliptic PDE coefficients by convex lifting.

The package lifts a nonlinear coefficient-recovery problem to a bilinear
unknown, relaxes the rank constraint through the nuclear norm, and solves
the resulting convex program with guarantees audited by dual certificates.
"""

__version__ = "0.1.0"
