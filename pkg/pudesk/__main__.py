import sys

from pudesk.cli import main


sys.exit(main())
