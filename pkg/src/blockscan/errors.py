"""Exception hierarchy shared across the pipeline."""


class BlockScanError(Exception):
    """Base class for every error raised by this package."""


class DataError(BlockScanError):
    """Input data is malformed or unusable (CLI exit code 2)."""


class SchemaError(DataError):
    pass


class DepthError(DataError):
    pass


class EmptyDataset(DataError):
    pass


class ParseError(DataError):
    pass


class CapacityError(BlockScanError):
    pass


class UnknownId(BlockScanError):
    pass


class OddDimension(BlockScanError):
    pass


class ShapeError(BlockScanError):
    pass


class InvalidBlock(BlockScanError):
    pass


class SequenceTooLong(BlockScanError):
    pass


class NoMaskedPositions(BlockScanError):
    pass


class RangeError(BlockScanError):
    pass


class NoEligiblePositions(BlockScanError):
    pass


class PositionOutOfRange(BlockScanError):
    pass


class EmptyCorpus(DataError):
    pass


class DivergenceError(BlockScanError):
    pass


class CorruptCheckpoint(DataError):
    pass


class WrongAttentionMode(BlockScanError):
    pass


class EmptySequence(BlockScanError):
    pass


class TooFewEmbeddings(BlockScanError):
    pass


class EmptyTrainSet(BlockScanError):
    pass


class InvalidGamma(BlockScanError):
    pass


class TooFewSamples(BlockScanError):
    pass


class DegenerateData(BlockScanError):
    pass


class DimensionMismatch(BlockScanError):
    pass


class DuplicateTxId(DataError):
    pass


class NoPositives(BlockScanError):
    pass


class NotApplicable(BlockScanError):
    pass
