import sys

from heridas.cli import main

sys.exit(main())
