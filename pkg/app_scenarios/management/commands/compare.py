from app_scenarios.management.commands._base import SimulationCommand
from app_scenarios.services import compare, load_report


class Command(SimulationCommand):
    help = (
        "Compara relatórios da mesma carga: p50, p95, throughput, fração "
        "de comunicação e util_proxy, com razões sobre o primeiro.\n"
        "Uso: python manage.py compare saida/block/report.json "
        "saida/pm/report.json"
    )

    def add_arguments(self, parser):
        parser.add_argument('reports', nargs='+',
                            help='Arquivos report.json.')
        parser.add_argument('--out', default=None,
                            help='Arquivo JSON de saída; padrão stdout.')

    def run(self, **options):
        reports = [(path, load_report(path)) for path in options['reports']]
        self.emit(compare(reports), options['out'])
