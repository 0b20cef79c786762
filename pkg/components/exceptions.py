"""
exceptions.py
Error taxonomy shared by the services, the agent and the simulator.

Every error carries a stable ``fault_code`` so it can cross the XML-RPC wire as a
fault and be rebuilt as the same class on the client side.
"""

import logging
from typing import Dict, List, Optional, Type

logger = logging.getLogger("exceptions")


class PullGridError(Exception):
    """Base class for every error raised by pullgrid."""

    fault_code = 1

    def __init__(self, message: str = ""):
        super().__init__(message)
        self.message = message

    def __str__(self) -> str:
        return self.message

    def to_fault_string(self) -> str:
        return f"{type(self).__name__}: {self.message}"

    @classmethod
    def from_fault(cls, message: str) -> "PullGridError":
        # Subclasses take structured constructor arguments; bypass them on rebuild.
        err = cls.__new__(cls)
        PullGridError.__init__(err, message)
        return err


class RemoteFault(PullGridError):
    """A fault whose code is not known locally."""

    fault_code = 2

    def __init__(self, code: int, message: str):
        super().__init__(f"[{code}] {message}")
        self.code = code


class ConfigError(PullGridError):
    fault_code = 3


# --- model -----------------------------------------------------------------

class MismatchedWorkflow(PullGridError):
    fault_code = 100


class InvalidPipeline(PullGridError):
    fault_code = 101
    step_index: Optional[int] = None

    def __init__(self, step_index: int, detail: str = ""):
        super().__init__(f"step {step_index} does not type-check against its predecessor{': ' + detail if detail else ''}")
        self.step_index = step_index


class InvalidParameters(PullGridError):
    fault_code = 102


# --- protocol --------------------------------------------------------------

class MalformedDocument(PullGridError):
    fault_code = 200


class UnsupportedType(PullGridError):
    fault_code = 201


class DepthExceeded(PullGridError):
    fault_code = 202


class MissingField(PullGridError):
    fault_code = 203
    name: Optional[str] = None

    def __init__(self, name: str):
        super().__init__(f"missing field '{name}'")
        self.name = name


# --- store -----------------------------------------------------------------

class Conflict(PullGridError):
    """Optimistic transaction lost a race; the caller may retry."""

    fault_code = 300


class CorruptJournal(PullGridError):
    fault_code = 301
    offset: Optional[int] = None

    def __init__(self, offset: int, detail: str = ""):
        super().__init__(f"corrupt journal record at offset {offset}{': ' + detail if detail else ''}")
        self.offset = offset


class IoFailure(PullGridError):
    fault_code = 302


# --- production / monitoring -----------------------------------------------

class DuplicateId(PullGridError):
    fault_code = 400


class UnknownWorkflow(PullGridError):
    fault_code = 401


class UnknownJob(PullGridError):
    fault_code = 402


class UnknownRun(PullGridError):
    fault_code = 403


class IllegalState(PullGridError):
    fault_code = 404


# --- bookkeeping -----------------------------------------------------------

class LfnConflict(PullGridError):
    fault_code = 500


class UnknownLfn(PullGridError):
    fault_code = 501


class NotPending(PullGridError):
    fault_code = 502


class ChecksumMismatch(PullGridError):
    fault_code = 503


class RejectedDataset(PullGridError):
    fault_code = 504


# --- software --------------------------------------------------------------

class MissingDependency(PullGridError):
    fault_code = 600


class DuplicateVersion(PullGridError):
    fault_code = 601


class CyclicDependency(PullGridError):
    fault_code = 602


class UnknownPackage(PullGridError):
    fault_code = 603


class InsufficientDisk(PullGridError):
    fault_code = 604


class NotInstalled(PullGridError):
    fault_code = 605


class DependedUpon(PullGridError):
    fault_code = 606
    dependents: List[str] = []

    def __init__(self, dependents: List[str]):
        super().__init__(f"still required by {', '.join(dependents)}")
        self.dependents = list(dependents)


# --- agent / simulator -----------------------------------------------------

class ServiceUnreachable(PullGridError):
    fault_code = 700


class BatchSubmissionFailed(PullGridError):
    fault_code = 701


class UnknownSite(PullGridError):
    fault_code = 702


class NoInnerResources(PullGridError):
    fault_code = 703


def _all_subclasses(cls: Type[PullGridError]) -> List[Type[PullGridError]]:
    found = []
    for sub in cls.__subclasses__():
        found.append(sub)
        found.extend(_all_subclasses(sub))
    return found


_FAULT_CLASSES: Dict[int, Type[PullGridError]] = {
    cls.fault_code: cls for cls in [PullGridError] + _all_subclasses(PullGridError)
}


def exception_for_fault(code: int, message: str) -> PullGridError:
    """Rebuild the exception that produced an XML-RPC fault."""
    cls = _FAULT_CLASSES.get(code)
    if cls is None or cls is RemoteFault:
        logger.warning(f"Unknown fault code {code}: {message}")
        return RemoteFault(code, message)
    prefix = f"{cls.__name__}: "
    if message.startswith(prefix):
        message = message[len(prefix):]
    return cls.from_fault(message)
