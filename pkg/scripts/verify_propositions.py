"""Dense verification of the error identities and bounds.

Usage: python scripts/verify_propositions.py [small|standard] [OUT]
"""

import sys

from bkfac.cli import main

if __name__ == "__main__":
    preset = sys.argv[1] if len(sys.argv) > 1 else "standard"
    out = sys.argv[2] if len(sys.argv) > 2 else "out/verify"
    sys.exit(main(["verify", "--preset", preset, "--out", out]))
