import sys

from nr_attack.cli import main

sys.exit(main())
