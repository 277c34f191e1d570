"""Fleet simulation and design toolkit for shared autonomous EVs."""

__version__ = "0.1.0"
