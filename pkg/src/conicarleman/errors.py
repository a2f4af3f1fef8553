class CarlemanError(Exception):
    """Base class for all errors raised by the package."""


class GeometryError(CarlemanError):
    pass


class RelocationError(CarlemanError):
    pass


class CertificationError(CarlemanError):
    """A mathematically meaningful failure (incompatible family, failed fit)."""


class ConfigError(CarlemanError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
