"""
Carga de los esquemas JSON de ``heridas/schemas``.
"""

import json
import os
from functools import lru_cache

SCHEMA_DIR = os.path.join(os.path.dirname(__file__), "schemas")


@lru_cache(maxsize=None)
def load_schema(name):
    """Carga el esquema JSON ``name`` desde el directorio de esquemas"""
    with open(os.path.join(SCHEMA_DIR, name), "r", encoding="utf-8") as f:
        return json.load(f)
