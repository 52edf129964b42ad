"""Trajectory containers and ground-truth LTI plants."""
