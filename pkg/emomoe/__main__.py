"""Allow running as: python -m emomoe"""

import sys

from emomoe.cli import main

sys.exit(main())
