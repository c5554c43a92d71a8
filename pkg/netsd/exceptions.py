"""
Error hierarchy shared by the card emulation, the switch, the host
controller, the filesystem layer and the gateway front-ends.

Each class carries the HTTP status the REST layer answers with, so views can
turn any NetSdError into a JsonResponse without a lookup table.
"""


class NetSdError(Exception):
    http_status = 500
    default_message = "NetSD error"

    def __init__(self, message=None):
        super().__init__(message or self.default_message)

    @property
    def code(self):
        return type(self).__name__


# sd_core

class NotPowered(NetSdError):
    default_message = "card is not powered"


class IllegalCommand(NetSdError):
    default_message = "illegal command"


class BadCrc(NetSdError):
    default_message = "command CRC-7 mismatch"


class CrcError(NetSdError):
    default_message = "data CRC-16 mismatch"


class AddressError(NetSdError):
    http_status = 416
    default_message = "block address out of range"


class NotInitialized(NetSdError):
    http_status = 503
    default_message = "card requires initialization"


# bus / switch

class NoPower(NetSdError):
    default_message = "power line is off"


class UnknownPort(NetSdError):
    http_status = 400
    default_message = "unknown switch port"


class UnknownLine(NetSdError):
    http_status = 400
    default_message = "unknown line"


class ExclusivityViolation(NetSdError):
    default_message = "more than one port is conductive outside a fault window"


class GrantTimeout(NetSdError):
    http_status = 409
    default_message = "timed out waiting for the card grant"


class ConfigError(NetSdError):
    http_status = 400
    default_message = "invalid configuration"


# faults

class InvalidSpec(NetSdError):
    http_status = 400
    default_message = "invalid fault specification"


class UnknownFaultId(NetSdError):
    http_status = 404
    default_message = "unknown fault id"


# dut_host

class NoGrant(NetSdError):
    http_status = 409
    default_message = "port does not hold the card grant"


class CardError(NetSdError):
    default_message = "card reported an error"


class RetriesExhausted(NetSdError):
    default_message = "retry limit exhausted"


# fatfs

class NotFound(NetSdError):
    http_status = 404
    default_message = "no such file or directory"


class NameInvalid(NetSdError):
    http_status = 422
    default_message = "name is not representable as an 8.3 short name"


class NoSpace(NetSdError):
    http_status = 413
    default_message = "no space left on volume"


class NotADirectory(NetSdError):
    http_status = 422
    default_message = "not a directory"


class IsADirectory(NetSdError):
    http_status = 422
    default_message = "is a directory"


class IoError(NetSdError):
    default_message = "block I/O failed"


# bench

class CalibrationInfeasible(NetSdError):
    default_message = "no model parameters satisfy every anchor"


# gateway

class NbdProtocolError(NetSdError):
    http_status = 400
    default_message = "NBD protocol violation"
