"""Two-branch structure/detail image deraining on a small numpy autodiff engine."""

__version__ = "0.1.0"
