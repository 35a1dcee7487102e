"""Exception types shared across the simulator.

The CLI maps these onto process exit codes (see ``fedadc.cli``).
"""


class FedADCError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(FedADCError, ValueError):
    """Invalid configuration, hyperparameter, or shape mismatch."""


class InputError(FedADCError, ValueError):
    """Invalid data handed to an otherwise well-configured operation."""


class PartitionError(FedADCError):
    """A partitioner could not produce a valid split."""


class SelectionError(FedADCError):
    """Client selection could not satisfy its constraint."""


class DivergedClientError(FedADCError, ArithmeticError):
    """A client produced a non-finite gradient or model."""

    def __init__(self, client_id, round_idx=None, detail=""):
        self.client_id = client_id
        self.round_idx = round_idx
        msg = f"client {client_id} diverged"
        if round_idx is not None:
            msg += f" in round {round_idx}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
