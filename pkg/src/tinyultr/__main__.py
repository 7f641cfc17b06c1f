import sys

from tinyultr.cli import main

sys.exit(main())
