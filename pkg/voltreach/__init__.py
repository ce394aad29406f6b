"""voltreach: mechanism-specific voltage-collapse risk estimation."""

__version__ = "1.0.0"
