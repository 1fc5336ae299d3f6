"""Allow ``python3 -m exec_sim``."""

import sys

from .cli import main

sys.exit(main())
