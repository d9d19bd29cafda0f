import sys
from typing import Optional

from loguru import logger
from src.config import Config

CONSOLE_FORMAT = (
    "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | "
    "<cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>"
)


def setup_logger(level: Optional[str] = None, log_file: Optional[str] = None):
    """
    配置 loguru：stderr 彩色输出 + 可选的按天滚动日志文件

    结果文件、checkpoint 和 loss 日志都不经过 logger，日志级别不影响产物内容。
    """
    level = (level or Config.LOG_LEVEL).upper()
    log_file = Config.LOG_FILE if log_file is None else log_file

    logger.remove()
    logger.add(sys.stderr, format=CONSOLE_FORMAT, level=level, colorize=True)

    if log_file:
        logger.add(log_file, rotation="1 day", retention="7 days", level=level, compression="zip")


setup_logger()
