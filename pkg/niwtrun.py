import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), 'modules'))

from niwt.cli import main as cli_main


def main() -> int:
    app_dir = os.path.dirname(os.path.abspath(__file__))
    argv = sys.argv[1:]
    default_config = os.path.join(app_dir, 'config.toml')
    if not any(a == '--config' or a.startswith('--config=') for a in argv) and os.path.exists(default_config):
        argv = argv + ['--config', default_config]
    try:
        return cli_main(argv)
    except KeyboardInterrupt:
        print("\nRun interrupted by user")
        return 130


if __name__ == "__main__":
    sys.exit(main())
