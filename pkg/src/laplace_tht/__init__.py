"""Laplace-transform time integration and adjoint inversion for transient hydraulic tomography.

Submodules are imported lazily so that thread-count environment variables set
by the command line still reach the numerical libraries.
"""
__version__ = "0.1.0"

_EXPORTS = {
    "build_mesh": "fem", "assemble": "fem", "point_source": "fem", "Mesh2D": "fem",
    "AssembledOperators": "fem",
    "CovarianceModel": "fields", "FieldRealization": "fields", "random_field": "fields",
    "franke_field": "fields", "covariance_matrix": "fields", "sample_field": "fields",
    "build_contour": "talbot", "inverse_laplace_sum": "talbot", "TalbotContour": "talbot",
    "solve_shifted_single": "shifted", "solve_shifted_flexible": "shifted",
    "solve_shifted_direct": "shifted", "select_preconditioner_shifts": "shifted",
    "residual_estimate": "shifted", "FactorCache": "shifted",
    "estimate_condition_1norm": "condest",
    "ForwardProblem": "forward", "solve_forward": "forward",
    "solve_forward_batch": "forward", "crank_nicolson": "forward",
    "Experiment": "adjoint", "assemble_jacobian": "adjoint", "sensitivity_row": "adjoint",
    "solve_adjoint_fields": "adjoint",
    "InversionProblem": "geostat", "invert": "geostat", "objective": "geostat",
    "gauss_newton_step": "geostat",
    "InvalidArgumentError": "errors", "FactorizationError": "errors",
    "ConvergenceError": "errors",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name):
    if name in _EXPORTS:
        import importlib

        mod = importlib.import_module(f".{_EXPORTS[name]}", __name__)
        return getattr(mod, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
