"""Sampled-Netflow traffic change analysis toolkit.

The package follows one flow of data: sampled flow records are parsed and
up-sampled (:mod:`flowshift.flows`, :mod:`flowshift.table`), attributed to
organizations (:mod:`flowshift.orgs`), classified into coarse classes and
applications (:mod:`flowshift.classify`, :mod:`flowshift.mg`), and finally
analysed for before/after changes (:mod:`flowshift.change`) and volumetric
anomalies (:mod:`flowshift.anomaly`).  :mod:`flowshift.synth` generates
labelled synthetic corpora that exercise every stage.
"""

__version__ = "0.1.0"


class FlowshiftError(Exception):
    """Base class for all errors raised by this package."""


class InputError(FlowshiftError):
    """Malformed or missing input (CLI exit code 2)."""


class InsufficientData(FlowshiftError):
    """Not enough observations for the requested analysis (CLI exit code 3)."""


class InvariantViolation(FlowshiftError):
    """An internal consistency check failed (CLI exit code 4)."""
