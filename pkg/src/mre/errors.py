"""Exception hierarchy shared across the package."""


class MREError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(MREError):
    """Input rejected before any work was done (CLI exit code 2)."""


class ParseError(ValidationError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class MissingModality(ValidationError):
    def __init__(self, entity, modality):
        self.entity = entity
        self.modality = modality
        super().__init__(f"entity {entity!r} has no {modality}")


class DanglingReference(ValidationError):
    pass


class InvalidSplit(ValidationError):
    pass


class InfeasibleSplit(MREError):
    pass


class ExhaustedCandidates(MREError):
    pass


class TooFewTriples(MREError):
    def __init__(self, relation, have, need):
        self.relation = relation
        super().__init__(f"relation {relation} has {have} triples, needs at least {need}")


class ShapeError(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class UnknownRelation(MREError):
    pass


class EmptySet(MREError):
    pass


class BatchTooSmall(MREError):
    pass


class MissingCenter(MREError):
    pass


class UnknownQuery(MREError):
    pass


class NonFiniteLoss(MREError):
    def __init__(self, phase, step, losses):
        self.phase = phase
        self.step = step
        self.losses = losses
        super().__init__(f"non-finite loss in {phase} at step {step}: {losses}")


class VersionMismatch(MREError):
    pass


class CorruptCheckpoint(MREError):
    pass
