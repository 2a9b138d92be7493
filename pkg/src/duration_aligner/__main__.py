import sys

from duration_aligner.cli import main

sys.exit(main())
