import sys

from havit.cli import main

sys.exit(main())
