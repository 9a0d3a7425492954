import sys

from ccdm.cli import main

sys.exit(main())
