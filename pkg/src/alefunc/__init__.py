"""Numerical toolkit for geometric functionals on radially symmetric
ALE manifolds: ADM mass, lambda-type energies, Perelman entropies, their
large-tau expansions, and Ricci flow diagnostics."""

from .geometry import (
    AleOrderReport,
    Block,
    Core,
    FarField,
    GeometryModel,
    Profile,
    RadialFunction,
    build_conformal_bump,
    build_eguchi_hanson,
    build_flat_cone,
    build_schwarzschild_conformal,
    build_truncated,
    build_warped,
    radial_laplacian,
    scalar_curvature,
    scale_metric,
    verify_ale_order,
)
from .gauge import (
    AsymptoticChart,
    asymptotic_chart,
    check_radial_gauge,
    default_ladder,
    to_radial_gauge,
)
from .functionals import (
    FunctionalReport,
    adm_mass,
    f_ale_energy,
    g_ale_energy,
    lambda_ale,
    mu_minimize,
    mu_upper_bound,
    nu,
    solve_u_infinity,
    w_functional,
)

__version__ = "0.1.0"
