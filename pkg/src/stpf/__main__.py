import sys

from stpf.cli import main

sys.exit(main())
