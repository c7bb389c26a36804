# encoding: utf-8

"""pudesk: a desk-scale workbench for a two-stage detector's geometry, losses
and evaluation protocol, with an ingestion gateway for detection results.
"""


# Try and determine the version of pudesk according to pkg_resources.
try:
    from pkg_resources import get_distribution, ResolutionError
    try:
        __version__ = get_distribution('pudesk').version
    except ResolutionError:
        __version__ = None  # unknown
except ImportError:
    __version__ = None  # unknown
