from __future__ import annotations

import sys
from pathlib import Path

# Test helpers (fixtures.py, support servers) live next to the tests.
sys.path.insert(0, str(Path(__file__).resolve().parent))
