import sys

from lrp_cmp.cli import main

sys.exit(main())
