"""Exception hierarchy shared across the toolchain.

The CLI maps these onto exit codes: usage problems exit 1, data/format
problems exit 2, internal simulation faults exit 3.
"""


class F4Error(Exception):
    """Base class for all toolchain errors."""


class DataFormatError(F4Error):
    """Malformed input data: bad IDX files, corrupt containers, bad configs."""


class NotRepresentable(F4Error):
    """A layer cannot be stored in the requested format (CSR tile > 32 nonzeros)."""


class SimulationFault(F4Error):
    """Internal datapath inconsistency, e.g. a FIFO pop on an empty queue."""
