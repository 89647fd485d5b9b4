from functools import wraps
import logging

from samlab.errors import ArgumentError, ConfigError, DataError, NumericalError

EXIT_OK = 0
EXIT_DATA = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def exit_code_for(error):
    """
    Map an exception to the command exit code: 1 for I/O and data errors,
    2 for configuration errors, 3 for numerical aborts.
    """
    if isinstance(error, (ConfigError, ArgumentError)):
        return EXIT_CONFIG
    if isinstance(error, NumericalError):
        return EXIT_NUMERICAL
    return EXIT_DATA


def exit_code_guard(f):
    """
    Decorator turning a command handler into a function that always returns an exit code.
    """

    @wraps(f)
    def decorated_function(*args, **kwargs):
        try:
            code = f(*args, **kwargs)
            return EXIT_OK if code is None else code
        except (ConfigError, ArgumentError) as e:
            logging.error(f"Configuration error in {f.__name__}: {e}")
            return EXIT_CONFIG
        except NumericalError as e:
            logging.error(f"Numerical abort in {f.__name__}: {e}")
            logging.exception("Full exception details:")
            return EXIT_NUMERICAL
        except (DataError, OSError) as e:
            logging.error(f"Data error in {f.__name__}: {e}")
            logging.exception("Full exception details:")
            return EXIT_DATA
        except Exception as e:
            logging.error(f"Unexpected error in {f.__name__}: {e}")
            logging.exception("Full exception details:")
            return exit_code_for(e)

    return decorated_function
