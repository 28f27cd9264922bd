"""Hot codec kernels, compiled when available.

The Cython build (``agrimon._speedups``) is imported if present; otherwise the
pure-Python module is used. Set ``AGRIMON_PURE_PYTHON=1`` to force the
fallback. ``BACKEND`` names the implementation actually in use.
"""

import os

from agrimon import _purepy

if os.environ.get("AGRIMON_PURE_PYTHON"):
    _impl = _purepy
else:
    try:
        from agrimon import _speedups as _impl
    except ImportError:
        _impl = _purepy

BACKEND = "python" if _impl is _purepy else "cython"
MAX_REMAINING_LENGTH = _purepy.MAX_REMAINING_LENGTH

crc16 = _impl.crc16
encode_remaining_length = _impl.encode_remaining_length
decode_remaining_length = _impl.decode_remaining_length
topic_matches = _impl.topic_matches

__all__ = [
    "BACKEND",
    "MAX_REMAINING_LENGTH",
    "crc16",
    "decode_remaining_length",
    "encode_remaining_length",
    "topic_matches",
]
