"""Entity linking on multiparty dialogue with a learned entity library."""

__version__ = "0.1.0"
