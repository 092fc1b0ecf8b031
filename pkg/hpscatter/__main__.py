import sys

from hpscatter.cli import main

sys.exit(main())
