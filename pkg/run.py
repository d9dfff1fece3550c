# run.py
import sys

from foliscope_app.main import main

if __name__ == "__main__":
    sys.exit(main())
