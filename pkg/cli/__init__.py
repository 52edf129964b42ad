"""Command-line interface for datampc."""
