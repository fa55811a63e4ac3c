"""
Argumentos comuns dos comandos que só precisam do zoológico.
"""
from app_scenarios.management.commands._base import SimulationCommand
from app_scenarios.services import build_zoo, load_scenario, load_zoo_file
from utils.commons.exceptions import ConfigError


class ZooCommand(SimulationCommand):

    def add_arguments(self, parser):
        source = parser.add_mutually_exclusive_group()
        source.add_argument('--zoo', help='Documento zoo.json.')
        source.add_argument('--config', help='Cenário (usa a seção zoo).')
        parser.add_argument('--out', default=None,
                            help='Arquivo JSON de saída; padrão stdout.')

    def load(self, options):
        if options.get('zoo'):
            return load_zoo_file(options['zoo'])
        if options.get('config'):
            return build_zoo(load_scenario(options['config']))
        raise ConfigError("Informe --zoo ou --config.",
                          errors={'zoo': 'obrigatório'})
