"""Linear span networks for object skeleton detection, on a small numpy autodiff engine."""

__version__ = "0.1.0"
