"""popinv: joint learning of parameter and noise distributions from population data."""

__version__ = "0.1.0"
