"""
Base dos comandos do simulador: saída JSON e tradução de exceções em
códigos de saída (2 configuração, 3 live-lock).
"""
import json
from pathlib import Path

from django.core.management.base import BaseCommand, CommandError

from utils.commons.exceptions import SimulacaoException


class SimulationCommand(BaseCommand):

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except SimulacaoException as exc:
            for path, message in sorted(getattr(exc, 'errors', {}).items()):
                self.stderr.write(f"{path}: {message}")
            raise CommandError(exc.message, returncode=exc.exit_code) \
                from exc

    def run(self, **options):
        raise NotImplementedError

    def emit(self, data, path=None):
        """JSON com chaves ordenadas no stdout ou no arquivo pedido."""
        text = json.dumps(data, indent=2, sort_keys=True, default=str)
        if path:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text + '\n')
            self.stdout.write(self.style.SUCCESS(f"Gravado em {path}"))
        else:
            self.stdout.write(text)
