"""Desk-scale laboratory for primal/dual indirect-utility analysis on finite
filtration trees and discretized diffusion markets: exact conjugacy and
optimality certificates, perturbed-market machinery, and first-order
sensitivity of the indirect-utility process."""

__version__ = "0.1.0"
