import sys

from dynsurv.cli import main

sys.exit(main())
