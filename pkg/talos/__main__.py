"""Run the command line with ``python -m talos``."""

import sys

from .cli import main

sys.exit(main())
