import sys

from amtss.cli import main

sys.exit(main())
