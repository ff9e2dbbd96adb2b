import sys

from larslab.cli import main

sys.exit(main())
