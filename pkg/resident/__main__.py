import sys

from resident.cli import main

sys.exit(main())
