import sys

from teefl.cli import main

sys.exit(main())
