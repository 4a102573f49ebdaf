"""Exception hierarchy.

Every error raised by the package derives from :class:`VitDeitError`; the
``category`` attribute is the short code the CLI prints in diagnostics.
"""


class VitDeitError(Exception):
    category = "error"


class ShapeError(VitDeitError, ValueError):
    category = "shape"


class NumericError(VitDeitError, ArithmeticError):
    category = "numeric"


class LabelError(VitDeitError, ValueError):
    category = "label"


class ContractError(VitDeitError, ValueError):
    category = "contract"


class ConfigError(VitDeitError, ValueError):
    category = "config"


class TeacherError(VitDeitError, ValueError):
    category = "teacher"


class ArityError(VitDeitError, ValueError):
    category = "arity"


class AlignmentError(VitDeitError, ValueError):
    category = "alignment"


class InputError(VitDeitError, ValueError):
    category = "input"


class ParseError(VitDeitError, ValueError):
    category = "parse"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class IntegrityError(VitDeitError, ValueError):
    category = "integrity"


class BalanceError(VitDeitError, ValueError):
    category = "balance"


class SplitError(VitDeitError, ValueError):
    category = "split"


class DecodeError(VitDeitError, ValueError):
    category = "decode"


class TrainingError(VitDeitError, RuntimeError):
    category = "training"

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch


class CheckpointError(VitDeitError, ValueError):
    category = "checkpoint"


class StateError(VitDeitError, RuntimeError):
    category = "state"
