"""Residual racial disparity in survival after a distributional mediator intervention."""

__version__ = "0.1.0"
