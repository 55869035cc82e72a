"""De-identification of clinical text as BIO sequence labeling.

Pipeline pieces: corpus ingestion in brat standoff format, pluggable
sub-word embedding stacks, a BiLSTM-CRF tagger, regex post-processing,
weighted-vote ensembling, span-level evaluation, and a deterministic
synthetic corpus generator. ``deidseq.cli`` wires them together.
"""

__version__ = "0.1.0"


class DeidseqError(Exception):
    """Base class for package errors."""


class DataError(DeidseqError):
    """Malformed or inconsistent input data (exit code 2 in the CLI)."""


class NumericError(DeidseqError):
    """Numerical failure such as a non-finite training loss (exit code 3)."""
