#!/usr/bin/env python
"""
Launcher for the evolq command-line interface.
"""

import os
import sys

# Project root on the import path
root_dir = os.path.abspath(os.path.dirname(__file__))
sys.path.insert(0, root_dir)

from app.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
