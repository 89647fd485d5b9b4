import logging
import sys

from samlab import create_app


app = create_app()

if __name__ == "__main__":
    logging.info("samlab started")
    sys.exit(app.run(sys.argv[1:]))
