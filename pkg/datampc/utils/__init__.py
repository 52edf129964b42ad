"""File formats and experiment assembly."""
