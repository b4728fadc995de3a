"""Value-independent dialog state tracking with a triple copy strategy.

Slots are filled by span extraction from user turns, by copying from the
system inform memory, or by copying the value of another slot already held
in the dialog state.
"""

__version__ = "0.1.0"
