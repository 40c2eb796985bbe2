"""``python -m hieragent``."""

import sys

from .cli import main

sys.exit(main())
