"""Exception hierarchy shared across the service."""


class CacsError(Exception):
    """Base class for every error raised by the service."""

    status = 500


class IllegalTransition(CacsError):
    status = 409

    def __init__(self, state, event):
        super().__init__(f"illegal transition: {state} + {event}")
        self.state = state
        self.event = event


class InvalidAsr(CacsError):
    status = 400

    def __init__(self, reason: str):
        super().__init__(f"invalid ASR: {reason}")
        self.reason = reason


class UnknownRoute(CacsError):
    status = 404


class NotFound(CacsError):
    status = 404


class UnknownApp(NotFound):
    pass


class UnknownCheckpoint(NotFound):
    pass


class Conflict(CacsError):
    status = 409


class ClusterUnavailable(CacsError):
    status = 409


class UnknownVm(NotFound):
    pass


class NodeUnreachable(CacsError):
    def __init__(self, vm_ids, results=None):
        super().__init__(f"unreachable nodes: {', '.join(vm_ids)}")
        self.vm_ids = list(vm_ids)
        self.results = results or []


class NoCheckpoint(CacsError):
    status = 409


class StorageFull(CacsError):
    pass


class RemoteUnavailable(CacsError):
    pass


class ImageUnavailable(CacsError):
    pass


class ClusterMismatch(CacsError):
    status = 400


class CountMismatch(CacsError):
    pass


class CorruptImage(CacsError):
    pass


class QuiesceTimeout(CacsError):
    pass


class UnknownDaemon(NotFound):
    pass


class EmptyCluster(CacsError):
    status = 400


class UploadFailed(CacsError):
    pass


class ScenarioFailed(CacsError):
    pass
