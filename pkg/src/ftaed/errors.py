"""Exception hierarchy shared by every stage of the pipeline."""


class FtaedError(Exception):
    """Base class for all pipeline errors."""


class MissingHeader(FtaedError):
    pass


class MalformedRow(FtaedError):
    def __init__(self, line, reason):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


class OutOfRangeValue(FtaedError):
    def __init__(self, field, line=None, value=None):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{field}={value!r} out of range")
        self.field = field
        self.line = line
        self.value = value


class UnknownKind(FtaedError):
    def __init__(self, kind, line=None):
        super().__init__(f"line {line}: unknown incident kind {kind!r}")
        self.kind = kind
        self.line = line


class EmptyInput(FtaedError):
    pass


class InconsistentCadence(FtaedError):
    pass


class DegenerateFeature(FtaedError):
    def __init__(self, feature):
        super().__init__(f"feature {feature!r} has zero range on the training data")
        self.feature = feature


class SplitOverflow(FtaedError):
    pass


class IsolatedCell(FtaedError):
    def __init__(self, cells):
        super().__init__(f"{len(cells)} cells have no observations in their neighborhood")
        self.cells = cells


class ShapeMismatch(FtaedError):
    def __init__(self, kind, *shapes):
        super().__init__(f"{kind}: incompatible shapes {shapes}")
        self.kind = kind
        self.shapes = shapes


class InvalidSegment(FtaedError):
    pass


class NonScalarLoss(FtaedError):
    pass


class NonFiniteProbe(FtaedError):
    pass


class ConfigMismatch(FtaedError):
    pass


class MissingRelationWeight(FtaedError):
    pass


class EmptyTrainingSet(FtaedError):
    pass


class DivergedLoss(FtaedError):
    pass


class MissingThreshold(FtaedError):
    pass


class DegenerateLabels(FtaedError):
    pass


class UnattainableTarget(FtaedError):
    pass


class OutOfBounds(FtaedError):
    pass


class ConfigError(FtaedError):
    def __init__(self, key, reason="unknown key"):
        super().__init__(f"config key {key!r}: {reason}")
        self.key = key


class CheckpointError(FtaedError):
    pass
