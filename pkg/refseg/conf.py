import os

import environ


class ImproperlyConfigured(Exception):
    pass


class Settings(dict):
    def __getattr__(self, item):
        return self.get(item)

    def __setattr__(self, key, value):
        self[key] = value


LOG_LEVELS = {"debug": "DEBUG", "info": "INFO"}


def setup_settings():
    env = environ.Env()
    env_file = os.environ.get("REFSEG_ENV_FILE", "refseg.env")
    if os.path.exists(env_file):
        env.read_env(env_file=env_file)
    log = env("REFSEG_LOG", default="info").lower()
    if log not in LOG_LEVELS:
        raise ImproperlyConfigured(
            "REFSEG_LOG must be one of {}, got {!r}".format(
                "|".join(LOG_LEVELS), log
            )
        )
    level = LOG_LEVELS[log]
    try:
        return Settings(
            LOG_LEVEL=level,
            DESCRIPTOR_BACKEND=env(
                "REFSEG_DESCRIPTOR_BACKEND",
                default="refseg.descriptors.handcrafted",
            ),
            NUM_THREADS=env.int("REFSEG_NUM_THREADS", default=1),
            SLOW_TESTS=env.bool("REFSEG_SLOW_TESTS", default=False),
            LOGGING_CONFIG={
                "version": 1,
                "disable_existing_loggers": False,
                "formatters": {
                    "standard": {
                        "format": (
                            "%(asctime)s [%(levelname)s] %(name)s: "
                            "%(message)s"
                        )
                    },
                },
                "handlers": {
                    "default": {
                        "level": level,
                        "formatter": "standard",
                        "class": "logging.StreamHandler",
                        "stream": "ext://sys.stdout",
                    },
                },
                "loggers": {
                    "refseg": {
                        "handlers": ["default"],
                        "level": level,
                        "propagate": False,
                    }
                },
            },
        )
    except ValueError as e:
        raise ImproperlyConfigured("Invalid environment value: {}".format(e))


settings = setup_settings()
