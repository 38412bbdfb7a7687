import logging
from typing import Any

from django.core.management.base import BaseCommand, CommandError

from fedseg.errors import FedSegError

logger = logging.getLogger(__name__)


class FedSegCommand(BaseCommand):
    """Maps fedseg failures to CommandError exit codes: 1 for runtime failures, 2 for usage errors."""

    def handle(self, *args: Any, **options: Any):
        try:
            return self.run(**options)
        except CommandError:
            raise
        except FedSegError as e:
            logger.error(f"{type(e).__name__}: {e}")
            raise CommandError(f"{type(e).__name__}: {e}", returncode=e.exit_code) from e
        except FileNotFoundError as e:
            raise CommandError(str(e), returncode=2) from e
        except OSError as e:
            raise CommandError(f"I/O failure: {e}", returncode=1) from e

    def run(self, **options: Any):
        raise NotImplementedError
