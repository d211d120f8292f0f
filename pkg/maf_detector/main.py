import sys

from maf_detector.app import main

if __name__ == "__main__":
    sys.exit(main())
