"""Exception hierarchy for the provhunt engine."""


class ProvHuntError(Exception):
    """Base class for all engine errors."""


class EventParseError(ProvHuntError):
    """A raw event record could not be parsed.

    Carries the 1-based line number (when known) and the offending field.
    """

    def __init__(self, message, line_no=None, field=None):
        self.line_no = line_no
        self.field = field
        prefix = ""
        if line_no is not None:
            prefix += f"line {line_no}: "
        if field is not None:
            prefix += f"field '{field}': "
        super().__init__(prefix + message)


class EventValidationError(EventParseError):
    """A record parsed but violated an event invariant (bad enum, negative ts, ...)."""


class FormatError(ProvHuntError):
    """A persisted artifact (graph snapshot, embedding file, checkpoint) is malformed."""


class QueryDBError(ProvHuntError):
    """The intelligence query database failed validation.

    ``issues`` holds one (line_no, message) tuple per bad record.
    """

    def __init__(self, message, issues=()):
        self.issues = list(issues)
        if self.issues:
            detail = "; ".join(f"line {ln}: {msg}" for ln, msg in self.issues)
            message = f"{message}: {detail}"
        super().__init__(message)


class IntelCoverageError(ProvHuntError):
    """An attack sequence has no intelligence entry for its label."""

    def __init__(self, missing_labels):
        self.missing_labels = sorted(set(missing_labels))
        super().__init__(
            "no intelligence entry for label(s): " + ", ".join(self.missing_labels)
        )


class MissingBenignAnchorError(ProvHuntError):
    """The query index has no benign entry; classification is undefined without one."""


class TrainingDivergedError(ProvHuntError):
    """Loss became NaN during training; carries diagnostics."""

    def __init__(self, epoch, batch, tau, grad_norms):
        self.epoch = epoch
        self.batch = batch
        self.tau = tau
        self.grad_norms = grad_norms
        super().__init__(
            f"NaN loss at epoch {epoch} batch {batch} (tau={tau:.6g}, "
            f"grad norms={grad_norms})"
        )


class StageError(ProvHuntError):
    """A pipeline stage failed; names the stage and the artifacts produced so far."""

    def __init__(self, stage, cause, artifacts):
        self.stage = stage
        self.cause = cause
        self.artifacts = dict(artifacts)
        super().__init__(f"stage '{stage}' failed: {cause}")
