"""advregion: certified adversarial input regions for dense ReLU networks."""

__version__ = "0.1.0"
