"""Exception types raised across the package."""


class DcgstError(Exception):
    pass


class IngestError(DcgstError):
    """Dataset directory is missing files or holds inconsistent content."""


class SplitError(DcgstError):
    pass


class ShapeError(DcgstError, ValueError):
    pass


class EmptyMaskError(DcgstError, ValueError):
    pass


class DegenerateWeightError(DcgstError, ValueError):
    """Weighted moments requested with zero total weight."""


class RunAborted(DcgstError):
    """A self-training run failed mid-way; ``reports`` holds the stages that finished."""

    def __init__(self, message: str, reports: list):
        super().__init__(message)
        self.reports = reports
