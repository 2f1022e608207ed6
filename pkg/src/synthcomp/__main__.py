import sys

from synthcomp.cli import main

sys.exit(main())
