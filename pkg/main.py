"""Run the promptscope harness from a source checkout: `python main.py all --out runs/toy`."""
from promptscope.cli import main

if __name__ == "__main__":
    main()
