"""Exception hierarchy. Every domain failure raised by the package derives from OORError."""


class OORError(Exception):
    """Base class for domain errors (the CLI maps these to exit code 1)."""

    code = "oor_error"


class DegenerateInput(OORError):
    code = "degenerate_input"


class EmptyMesh(OORError):
    code = "empty_mesh"


class InsufficientRank(OORError):
    code = "insufficient_rank"


class NoCorrespondences(OORError):
    code = "no_correspondences"


class DegenerateConfiguration(OORError):
    code = "degenerate_configuration"


class ConsensusFailure(OORError):
    code = "consensus_failure"


class InsufficientPoints(OORError):
    code = "insufficient_points"


class RegistrationRejected(OORError):
    code = "registration_rejected"


class OutOfRange(OORError):
    code = "out_of_range"


class UnknownContext(OORError):
    code = "unknown_context"


class FormatVersionMismatch(OORError):
    code = "format_version_mismatch"


class CorruptCheckpoint(OORError):
    code = "corrupt_checkpoint"


class GraphInvalid(OORError):
    code = "graph_invalid"


class InsufficientSamples(OORError):
    code = "insufficient_samples"


class DimensionMismatch(OORError):
    code = "dimension_mismatch"
