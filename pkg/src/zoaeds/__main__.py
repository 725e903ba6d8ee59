"""``python -m zoaeds``."""
import sys

from zoaeds.cli import main

sys.exit(main())
