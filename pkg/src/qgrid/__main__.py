import sys

from qgrid.cli import main

sys.exit(main())
