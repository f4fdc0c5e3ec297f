"""Question-asking RL agent with a predicate-grammar Oracle in MultiRoom gridworlds."""

__version__ = "0.1.0"
