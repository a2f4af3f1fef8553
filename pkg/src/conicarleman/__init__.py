"""Numerical laboratory for multiple-weight Carleman estimates on conic surfaces."""

__version__ = "0.1.0"

from conicarleman.errors import CarlemanError, GeometryError, RelocationError, CertificationError

__all__ = ["CarlemanError", "GeometryError", "RelocationError", "CertificationError", "__version__"]
