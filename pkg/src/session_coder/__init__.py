"""Session-level CTRS quality scoring with recurrent attention networks."""

__version__ = "0.1.0"
