"""Desk-scale fully convolutional networks: stride algebra, numpy ops, training and metrics."""

__version__ = "0.1.0"
