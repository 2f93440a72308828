"""Difference-equation models of post-meal glucose.

Models are learned per cluster of similar pre-meal states, either by
grammatical evolution or by sparse regression, and scored by iterating
them over the two hours after a meal.
"""

__version__ = "0.1.0"
