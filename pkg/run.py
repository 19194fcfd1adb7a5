import sys

from aogdet.cli import main

# This is the entry point for the command-line tool.
# It forwards the arguments to the CLI in the aogdet package, e.g.
#     python run.py synth --out corpus/
#     python run.py eval --detections dets.txt --manifest corpus/test.txt
# Settings come from AOG_* environment variables (a .env file is picked up)
# or from a `--config` file.

if __name__ == '__main__':
    sys.exit(main())
