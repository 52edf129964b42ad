"""datampc - data-driven predictive control from a single measured trajectory."""

__version__ = "0.1.0"
__author__ = "datampc developers"
