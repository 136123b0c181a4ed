"""
CLI entry point for nodseg
"""

import sys

from nodseg.cli import main

if __name__ == "__main__":
    sys.exit(main())
