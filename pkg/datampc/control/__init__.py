"""Quadratic programming and receding-horizon control."""
