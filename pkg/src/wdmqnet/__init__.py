"""Planning, simulation and analysis of wavelength-multiplexed entanglement networks."""

__version__ = "0.1.0"
