"""Exception hierarchy shared by all pipeline stages."""


class MbmError(Exception):
    """Base class for every error raised by mbmdetect."""


# codec orchestration

class CodecError(MbmError):
    pass


class ToolNotFound(CodecError):
    pass


class NotAVideo(CodecError):
    pass


class UnsupportedCodec(CodecError):
    pass


class EncoderFailure(CodecError):
    def __init__(self, message, stderr=""):
        super().__init__(message if not stderr else f"{message}\n{stderr.strip()}")
        self.stderr = stderr


class DecoderFailure(EncoderFailure):
    pass


class EmptyDebugOutput(CodecError):
    pass


class FrameCountMismatch(MbmError):
    pass


class ToolVersionMismatch(MbmError):
    pass


# parsing / merging

class GrammarError(MbmError):
    def __init__(self, line_no, excerpt, reason="unparseable line"):
        super().__init__(f"line {line_no}: {reason}: {excerpt!r}")
        self.line_no = line_no
        self.excerpt = excerpt


class DimensionMismatch(MbmError):
    pass


class InvalidBlockSize(MbmError):
    pass


class OrphanVector(MbmError):
    pass


class MvOnIntra(MbmError):
    pass


# features

class NoPFrames(MbmError):
    pass


class EmptyTrainingSet(MbmError):
    pass


class LengthMismatch(MbmError):
    pass


class ScalingMismatch(MbmError):
    pass


# classifier

class SingleClassInput(MbmError):
    pass


class InsufficientSamples(MbmError):
    pass


class InsufficientTrainingData(MbmError):
    pass


class ModelFormatError(MbmError):
    pass
