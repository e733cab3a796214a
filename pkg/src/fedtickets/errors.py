"""Exception types shared across the package.

Every error that callers are expected to catch carries enough structured
context (field paths, indices, epochs) to be reported without re-parsing
the message string.
"""


class FedTicketsError(Exception):
    """Base class for all package errors."""


class ShapeMismatchError(FedTicketsError):
    """Tensor or mask shapes do not line up."""

    def __init__(self, where: str, expected, got):
        self.where = where
        self.expected = expected
        self.got = got
        super().__init__(f"{where}: expected shape {expected}, got {got}")


class ArchitectureError(FedTicketsError):
    """Layer list violates a structural rule (dims, ordering, prunability)."""


class TrainingDivergedError(FedTicketsError):
    """Loss became NaN/Inf during training."""

    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch} (loss={loss!r})")


class LayerCollapseError(FedTicketsError):
    """Requested pruning rate would leave a layer with zero retained units."""

    def __init__(self, layer: int, rate: float):
        self.layer = layer
        self.rate = rate
        super().__init__(
            f"pruning rate {rate} empties prunable layer {layer}; every layer must retain at least one unit"
        )


class InsufficientClientsError(FedTicketsError):
    """Outlier detection needs a minimum population of clients."""


class UndefinedOverlapError(FedTicketsError):
    """Neuron overlap is undefined when the reference mask retains nothing."""


class EmptyAsrSetError(FedTicketsError):
    """Attack-success evaluation got an empty triggered test set."""


class EmptyDatasetError(FedTicketsError):
    """An operation that needs samples received none."""


class ConfigError(FedTicketsError):
    """Invalid configuration value; `path` is the dotted field path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class ClientRoundError(FedTicketsError):
    """A client failed inside a federation round; wraps the original error."""

    def __init__(self, client_id: int, round_num: int, cause: Exception):
        self.client_id = client_id
        self.round_num = round_num
        self.cause = cause
        super().__init__(f"client {client_id} failed in round {round_num}: {cause}")


class OutputLockedError(FedTicketsError):
    """Another process holds the lock on the requested output directory."""
