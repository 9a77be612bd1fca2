"""main entry point"""
# pylint: disable=wrong-import-position

import logging
logging.basicConfig(level=logging.INFO)

import sys

# import custom modules late, to ensure logging has been configured
from . import cli


if __name__ == '__main__':
    sys.exit(cli.main())
