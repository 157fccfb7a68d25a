"""Test-session setup.

NUMBA_NUM_THREADS must be raised before numba is first imported so the
thread-count-invariance tests can actually switch between 1 and 2 workers on
single-core runners (numba otherwise caps the pool at the core count).
"""

import os

os.environ.setdefault("NUMBA_NUM_THREADS", "4")
