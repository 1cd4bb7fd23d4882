import sys

from floodsync.cli import main

sys.exit(main())
