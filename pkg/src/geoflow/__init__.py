"""Numerical laboratory for geodesic flows on surfaces.

Submodules: ``metrics`` (geometry), ``flow`` (geodesics and Jacobi fields),
``counting`` (arcs between points), ``entropy`` (growth-rate estimators),
``adapted`` (f-matrix and tube probe) and ``cli``.
"""

from .adapted import (
    CurvatureProfile,
    FSample,
    chebyshev_profile,
    closed_form_profile,
    constant_profile,
    f_matrix,
    phi_along_geodesic,
    tube_radius_probe,
    verify_theorem_mero,
)
from .counting import CountResult, berger_bott_integral, count_geodesics, counting_integral_direct
from .entropy import EntropyEstimate, GrowthSeries, fit_entropy, jacobi_det_series, mane_series, spanning_series
from .errors import GeoflowError
from .flow import GeodesicArc, JacobiFrame, PhasePoint, integrate_geodesic, jacobi_propagate, phase_point
from .metrics import (
    SurfaceMetric,
    SurfacePoint,
    christoffel,
    ellipsoid,
    flat_torus,
    gauss_curvature,
    metric_eval,
    metric_from_dict,
    paternain,
    register_custom_metric,
    round_sphere,
)

__version__ = "0.1.0"
