"""noiselur: land-use regression for urban traffic noise.

Measurement sites plus geodata in, trained and compared models out,
then 50 m noise surfaces and population exposure tables.
"""
__version__ = "0.1.0"

from ._core import HAVE_COMPILED, IMPLEMENTATION

__all__ = ["HAVE_COMPILED", "IMPLEMENTATION", "__version__"]
