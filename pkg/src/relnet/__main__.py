"""Module entry point for ``python -m relnet``."""

import sys

from .cli import main

sys.exit(main())
