import sys

from simstore_orl.cli import main

sys.exit(main())
