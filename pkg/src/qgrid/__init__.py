"""Symmetric-key authentication for publish/subscribe grid messaging.

Keys arrive as a framed stream from a QKD-style key service, IVs are chunked
from a random source, and every published message carries a GMAC tag that the
receiver checks for replay, freshness, topic and integrity.
"""

from qgrid.errors import QGridError

__version__ = "0.1.0"

__all__ = ["QGridError", "__version__"]
