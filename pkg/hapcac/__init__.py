import sys

MINIMUM_VERSION = (3, 8)

if sys.version_info[:2] < MINIMUM_VERSION:
    err_msg = "This version of Python ({}.{}) is not supported!\n".format(
        *sys.version_info
    ) + "hapcac needs Python {}.{} or newer.".format(*MINIMUM_VERSION)
    raise RuntimeError(err_msg)

__version__ = "0.1.0"
