from typing import List, Optional, Sequence


class AugmentError(Exception):
    """Base class for every error raised by the augmentation pipeline."""


class InvalidArgument(AugmentError, ValueError):
    pass


class ConfigError(AugmentError):
    pass


class AnnotationParseError(AugmentError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class AnnotationValidationError(AugmentError):
    def __init__(self, annotation_ids: Sequence[int], details: Sequence[str] = ()):
        self.annotation_ids = list(annotation_ids)
        self.details = list(details)
        listing = "; ".join(self.details) or ", ".join(str(i) for i in self.annotation_ids)
        super().__init__(f"invalid annotations {self.annotation_ids}: {listing}")


class CategoryRegistryError(AugmentError):
    pass


class LayoutValidationError(AugmentError):
    def __init__(self, index: int, problems: Sequence[str]):
        self.index = index
        self.problems = list(problems)
        super().__init__(f"layout {index} is invalid: {'; '.join(self.problems)}")


# Retryable signals raised while turning an LLM completion into a Layout

class RetryableLayoutError(AugmentError):
    pass


class ParseFailure(RetryableLayoutError):
    pass


class BoxInvalid(RetryableLayoutError):
    def __init__(self, index: int, reason: str):
        self.index = index
        super().__init__(f"box {index}: {reason}")


class CategoryMismatch(RetryableLayoutError):
    def __init__(self, expected: dict, found: dict):
        self.expected = expected
        self.found = found
        super().__init__(f"expected categories {expected}, parsed {found}")


class BackendError(AugmentError):
    """Transport or backend failure; callers may retry."""


class ProtocolError(AugmentError):
    """The backend answered, but not with what the contract requires."""


class ScoringError(AugmentError):
    pass


class SpeAborted(AugmentError):
    def __init__(self, message: str, completed: List, total: int):
        self.completed = completed
        self.total = total
        super().__init__(f"{message} ({len(completed)}/{total} layouts generated)")


class PipelineAborted(AugmentError):
    def __init__(self, message: str, completed_layout_ids: List[str], cause: Optional[Exception] = None):
        self.completed_layout_ids = completed_layout_ids
        self.cause = cause
        super().__init__(f"{message} ({len(completed_layout_ids)} layouts committed before the failure)")
