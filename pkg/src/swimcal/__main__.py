import sys

from swimcal.cli import main

sys.exit(main())
