import sys

from microdet.cli import main

sys.exit(main())
