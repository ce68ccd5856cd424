"""Globally optimal point-cloud registration under uncertainty via mixed-integer programming."""

__version__ = "0.1.0"
