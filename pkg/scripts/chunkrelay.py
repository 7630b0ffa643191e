#!/usr/bin/env python
"""
CLI entry point for chunkrelay: dataset generation, simulated scenario runs,
report comparison and real-broker nodes.
"""

import sys
from pathlib import Path

# Allow running the script directly without installing the package.
ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from src.cli import main


if __name__ == "__main__":
    sys.exit(main())
