import sys

from dfdnet.cli import main

sys.exit(main())
