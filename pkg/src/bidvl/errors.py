"""Exception hierarchy shared by every module."""


class BidvlError(Exception):
    """Base class; ``where`` names the module and operation that raised."""

    def __init__(self, message: str, where: str = ""):
        self.where = where
        super().__init__(f"[{where}] {message}" if where else message)


class ShapeError(BidvlError):
    pass


class DomainError(BidvlError):
    pass


class ContractError(BidvlError):
    pass


class NumericError(BidvlError):
    pass


class ConfigError(BidvlError):
    pass


class FormatError(BidvlError):
    pass


class CorruptionError(FormatError):
    pass


class UnsupportedError(BidvlError):
    pass
