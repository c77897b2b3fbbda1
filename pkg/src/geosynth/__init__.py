"""Privacy/utility toolkit for disseminating georeferenced survey microdata."""

__version__ = "0.1.0"
