"""Numeric tolerances shared across the library.

Module-level constants so downstream code (and tests) can override them in
one place instead of sprinkling magic numbers.
"""

# Orthonormality / SO(3) membership checks on rotation matrices.
ROTATION_TOL = 1e-12

# Threshold below which a constraint residual counts as zero, relative to the
# magnitudes of the terms entering the constraint.
RESIDUAL_TOL = 1e-9

# Conditioning cutoff for least-squares subproblems (depth recovery, scale
# recovery): smallest/largest singular value below this flags the result as
# indeterminate.
CONDITIONING_TOL = 1e-10

# A complex root counts as real when |imag| <= REAL_ROOT_TOL * max(1, |real|).
REAL_ROOT_TOL = 1e-6
