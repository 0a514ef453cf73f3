import sys

from diversim.cli import main

sys.exit(main())
