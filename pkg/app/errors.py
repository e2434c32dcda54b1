"""Exception hierarchy; the CLI maps these to exit codes."""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


class MixsegError(Exception):
    exit_code = EXIT_STAGE


class ConfigError(MixsegError):
    exit_code = EXIT_CONFIG


class StageError(MixsegError):
    exit_code = EXIT_STAGE

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage.upper()}] {message}")


class DivergenceError(MixsegError):
    """Loss or gradient went NaN/Inf during training."""
