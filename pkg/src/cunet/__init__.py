"""Top-level package for cunet."""

from importlib.metadata import metadata, version

PKG_METADATA = metadata(__name__)

__version__ = version(__name__)
__author__ = PKG_METADATA["Author"]

PKG_NAME = PKG_METADATA["Name"]
PKG_SUMMARY = PKG_METADATA["Summary"]
