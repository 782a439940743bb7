"""
Clasificación de severidad de heridas (Verde / Amarillo / Rojo) a partir de
fotografías, con transfer learning, modelos apilados y multi-zoom.
"""

__version__ = "0.1.0"
