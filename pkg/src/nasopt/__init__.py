"""Architecture search over tiny convolutional cells that emit candidate
solutions for bound-constrained continuous optimization problems."""

__version__ = "0.1.0"

from . import autodiff, builder, controller, ensemble, genotype  # noqa: F401
from . import objectives, plots, search, surrogate, trainer, verify  # noqa: F401
