import sys

from effdiff.cli import main

sys.exit(main())
