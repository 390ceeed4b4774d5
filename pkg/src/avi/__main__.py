import sys

from avi.cli import main

sys.exit(main())
