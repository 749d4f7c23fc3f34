import sys

from safecf.cli import main

sys.exit(main())
