import sys

from dagdoc.cli import main

sys.exit(main())
