from hdivflow.cli import create_cli
from hdivflow.utils import setup_logging

if __name__ == "__main__":
    # python main.py run --config cases/lattice.cfg
    setup_logging()
    cli = create_cli()
    cli()
