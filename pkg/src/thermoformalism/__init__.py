"""Numerical thermodynamic formalism for expanding and intermittent maps.

Transfer operators of circle maps, linear torus endomorphisms and skew
products are discretised (Ulam, or Fourier/Chebyshev collocation); pressure curves,
equilibrium states and spectral-gap diagnostics are computed from their
leading spectral data and checked against brute-force oracles.
"""

from .dynamics import (CircleMap, FiberFamily, SkewProduct, TorusEndomorphism, doubling, manneville_pomeau,
                       periodic_orbits, perturbed_doubling, piecewise_linear, preimage_tree, smooth_intermittent)
from .operator import Scheme, build, leading_eigentriple, subleading_modulus
from .potentials import Potential, constant, cosine, flatten, geometric_potential, trig_poly
from .thermo import equilibrium_state, phase_transition_scan, pressure_sweep

__version__ = "0.1.0"
