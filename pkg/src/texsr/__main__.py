import sys

from texsr.cli import main

sys.exit(main())
