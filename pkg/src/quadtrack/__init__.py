"""quadtrack: one embedding, one head, four tracking task modes."""

__version__ = "0.1.0"
