"""Run as ``python3 -m fitflow``."""

import sys

from .harness.cli import main

sys.exit(main())
