import os
from dotenv import load_dotenv

load_dotenv()


def _flag(value: str | None, default: bool) -> bool:
    if value is None:
        return default
    return value.strip().lower() not in ("0", "false", "no", "off")


class Settings:
    def __init__(self):
        self.CONFIG_PATH = os.getenv("MDF_CONFIG", "configs/toy.json")
        self.OUT_DIR = os.getenv("MDF_OUT", "runs")
        self.LOG_LEVEL = os.getenv("MDF_LOG_LEVEL", "INFO").upper()

        # Every forward op rejects NaN/Inf outputs while this is on
        self.CHECK_FINITE = _flag(os.getenv("MDF_CHECK_FINITE"), True)

        self.LOG_FORMAT = "%(levelname)-5.5s [%(name)s] %(message)s"
        self.CHECKPOINT_FORMAT_VERSION = 1


settings = Settings()
