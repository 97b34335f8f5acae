"""Exception types raised by panelcf.

The hierarchy is deliberately shallow: callers that just want "did it
work" can catch :class:`PanelcfError`; the CLI maps
:class:`ConfigError` to exit code 2 and everything else to exit code 1.
"""

from __future__ import annotations


class PanelcfError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PanelcfError):
    """A configuration value is missing, malformed, or out of range."""


class DataError(PanelcfError):
    """Input data violates a structural requirement (duplicates,
    inconsistent per-unit metadata, no control units, ...)."""


class UnderIdentifiedError(DataError):
    """The observation set is too thin to support estimation.

    Carries ``row_index`` / ``col_index`` when the problem is a fully
    unobserved row or column, so callers holding the unit/time labels
    can rewrite the message in those terms.
    """

    def __init__(self, message: str, *, row_index: int | None = None,
                 col_index: int | None = None):
        super().__init__(message)
        self.row_index = row_index
        self.col_index = col_index


class CollinearCovariatesError(DataError):
    """The covariate design is rank deficient.

    ``indices`` lists the offending covariate columns (the ones that are
    linearly dependent on earlier columns).
    """

    def __init__(self, indices):
        self.indices = tuple(int(i) for i in indices)
        super().__init__(
            "covariate design is rank deficient; dependent column indices: "
            f"{list(self.indices)}"
        )


class EstimationError(PanelcfError):
    """An estimation step could not produce a usable result."""
