"""tdntc: network traffic classification with time-distributed CNN/LSTM models.

Kept import-light on purpose: the CLI applies the TDNTC_THREADS cap to the
BLAS thread-count environment variables before numpy is first imported, so
nothing heavy may be pulled in at package-import time.
"""

__version__ = "0.1.0"
