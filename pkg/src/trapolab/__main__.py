import sys

from trapolab.cli import main

sys.exit(main())
