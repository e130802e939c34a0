"""Centralized numerical tolerances."""

from dataclasses import dataclass


@dataclass(frozen=True)
class Tolerances:
    lp_feasibility: float = 1e-9
    lp_optimality: float = 1e-8
    lp_pivot: float = 1e-11
    # g_i must exceed this for the origin to count as strictly interior
    strict_interior: float = 1e-9
    contains: float = 1e-9
    # relative margin to the boundary of S below which the safe policy falls back to Kx
    interior_eps: float = 1e-7
    certificate: float = 1e-9
    # candidate rows within this of the current set are treated as redundant
    rpi_redundancy: float = 1e-10
    safety_membership: float = 1e-8


TOL = Tolerances()
