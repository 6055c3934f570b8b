"""Allow ``python -m gazenlq``."""

import sys

from .cli import main

sys.exit(main())
