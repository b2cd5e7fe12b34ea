"""Exception hierarchy shared across the toolkit.

Every error carries the module that raised it and the process exit code the
CLI should use when it escapes a subcommand.
"""


class FgamError(Exception):
    module = "fgam"
    exit_code = 2

    def __str__(self) -> str:
        return f"[{self.module}] {super().__str__()}"


class UsageError(FgamError):
    module = "cli"
    exit_code = 1


class PreconditionError(FgamError):
    exit_code = 3


# pe_format
class PeFormatError(FgamError):
    module = "pe_format"


class MissingMzMagic(PeFormatError):
    pass


class BadPeOffset(PeFormatError):
    pass


class SectionOutOfBounds(PeFormatError):
    pass


class TruncatedHeader(PeFormatError):
    pass


class InconsistentLayout(PeFormatError):
    pass


class BadOptionalHeader(PeFormatError):
    pass


# manipulations
class ManipulationError(FgamError):
    module = "manipulations"


class NoHeaderSlack(ManipulationError):
    pass


class InvalidSpec(ManipulationError):
    pass


class RangeOutOfBounds(ManipulationError):
    pass


class LengthMismatch(ManipulationError):
    pass


# imaging
class ImagingError(FgamError):
    module = "imaging"


class SizeOutOfRange(ImagingError):
    pass


class MissingProvenance(ImagingError):
    pass


# neural
class NeuralError(FgamError):
    module = "neural"


class ShapeMismatch(NeuralError):
    pass


class DegenerateDataset(NeuralError):
    pass


class CheckpointError(NeuralError):
    pass


# fgam_attack
class AttackError(FgamError):
    module = "fgam_attack"


class InsufficientHistory(AttackError):
    pass


class NotClassifiedMalware(PreconditionError):
    module = "fgam_attack"


# evaluation
class EvaluationError(FgamError):
    module = "evaluation"


class PreconditionViolation(PreconditionError):
    module = "evaluation"


class EmptyInput(EvaluationError):
    pass


# corpus
class SpecInvalid(FgamError):
    module = "corpus"


class NotNativeSize(ImagingError):
    pass


class MissingArtifact(PreconditionError):
    """An earlier pipeline step (gen-corpus, train) has not produced its output yet."""

    module = "cli"
