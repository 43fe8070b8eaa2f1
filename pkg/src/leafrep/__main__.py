"""Allow running with `python -m leafrep`."""
import sys

from .cli import main

sys.exit(main())
