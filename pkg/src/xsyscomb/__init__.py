"""Cross-system combination of a frame-synchronous TDNN and a label-synchronous
Conformer recogniser on a synthetic speaker-variable corpus."""

__version__ = "0.1.0"
