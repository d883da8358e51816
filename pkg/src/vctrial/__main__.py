import sys

from vctrial.cli import main

sys.exit(main())
