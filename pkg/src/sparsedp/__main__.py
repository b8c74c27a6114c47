import sys

from sparsedp.harness.cli import main

sys.exit(main())
