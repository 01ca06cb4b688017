import logging
import sys


class QerlTestFilter(logging.Filter):
    """
    Only lets records from the qerl package through.
    """

    def filter(self, record: logging.LogRecord) -> bool:
        return record.name.startswith("qerl")


def setup_test_logging() -> None:
    """
    Routes qerl logs to stdout during tests so they show up next to failures.
    Training loops log at info per episode, so the handler stays at INFO.
    """
    logger = logging.getLogger()
    logger.handlers.clear()
    logger.setLevel(logging.INFO)

    stream_handler = logging.StreamHandler(sys.stdout)
    stream_handler.setLevel(logging.INFO)
    stream_handler.addFilter(QerlTestFilter())
    stream_handler.setFormatter(
        logging.Formatter("[qerl] %(levelname)-5s %(asctime)s %(filename)s:%(lineno)d | %(message)s")
    )
    logger.addHandler(stream_handler)

    logging.getLogger("qerl").setLevel(logging.INFO)


setup_test_logging()
