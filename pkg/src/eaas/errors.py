"""Exception hierarchy shared by the controller, agents, CLI and bench.

Every error class carries a distinct process exit code so the CLI can map
failures one-to-one onto documented codes (see README).
"""


class EaasError(Exception):
    """Base class for all platform errors."""

    exit_code = 1


# --- protocol ---------------------------------------------------------------

class InvariantViolation(EaasError):
    """A message failed validation against its type invariants."""

    exit_code = 21


class MalformedFrame(EaasError):
    """A wire frame could not be parsed (framing, encoding or syntax)."""

    exit_code = 22


class UnknownMessageType(EaasError):
    """A frame carried a type tag no message is registered for."""

    exit_code = 23


class InvalidTransition(EaasError):
    """The requested container action is not legal from the current state."""

    exit_code = 15


# --- controller --------------------------------------------------------------

class Unauthorized(EaasError):
    exit_code = 10


class BadCredentials(EaasError):
    exit_code = 11


class DuplicateUser(EaasError):
    exit_code = 12


class UnknownNode(EaasError):
    exit_code = 13


class NodeUnreachable(EaasError):
    exit_code = 14


class AgentError(EaasError):
    """The agent reported a failure executing a forwarded request."""

    exit_code = 16


class UnknownHandle(EaasError):
    exit_code = 17


class AlreadyDownloaded(EaasError):
    exit_code = 18


class Expired(EaasError):
    exit_code = 19


class BindFailure(EaasError):
    exit_code = 24


# --- edge agent --------------------------------------------------------------

class ControllerUnreachable(EaasError):
    exit_code = 26


class RuntimeFailure(EaasError):
    """A container runtime operation failed; the container is marked failed."""

    exit_code = 25


# --- container runtime -------------------------------------------------------

class DuplicateId(EaasError):
    exit_code = 27


class SpawnFailure(EaasError):
    exit_code = 28


class InvalidHandle(EaasError):
    exit_code = 29


class WrongState(EaasError):
    exit_code = 30


class WorkloadFailure(EaasError):
    exit_code = 31


class Timeout(EaasError):
    exit_code = 32


class BackendUnavailable(EaasError):
    exit_code = 37


class InjectedFault(EaasError):
    """Raised by the mock backend when a scripted fault matches an operation."""

    exit_code = 39


# --- bench -------------------------------------------------------------------

class InsufficientTrials(EaasError):
    exit_code = 33


class EnvironmentUnstable(EaasError):
    exit_code = 34


class Overload(EaasError):
    exit_code = 35


class LaunchFailure(EaasError):
    """A scalability run failed launching a specific container."""

    exit_code = 36

    def __init__(self, message: str, index: int | None = None, container_id: str | None = None):
        super().__init__(message)
        self.index = index
        self.container_id = container_id


# --- config / CLI ------------------------------------------------------------

class ConfigError(EaasError):
    exit_code = 38


class ApiConnectionError(EaasError):
    """The CLI could not reach the controller API at all."""

    exit_code = 20


#: every EaasError subclass keyed by class name, for wire error reconstruction
ERRORS_BY_NAME = {
    cls.__name__: cls
    for cls in list(globals().values())
    if isinstance(cls, type) and issubclass(cls, EaasError)
}
