import logging

from samlab.config import load_configurations, configure_logging
from samlab.commands import COMMANDS, build_parser


class Lab:
    """Command dispatcher: parses argv and hands off to the registered handler."""

    def __init__(self, settings):
        self.settings = settings
        self.commands = {}
        self.parser = None

    def register_commands(self, commands, parser):
        self.commands.update(commands)
        self.parser = parser

    def run(self, argv=None):
        try:
            args = self.parser.parse_args(argv)
        except SystemExit as e:
            return e.code if isinstance(e.code, int) else 2
        logging.info(f"Running {args.command}")
        return self.commands[args.command](args, self.settings)


def create_app():
    # Load configurations and logging settings
    settings = load_configurations()
    configure_logging(settings.log_level)

    lab = Lab(settings)
    lab.register_commands(COMMANDS, build_parser())

    return lab
