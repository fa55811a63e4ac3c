from app_scenarios.management.commands._zoo import ZooCommand
from app_scenarios.services import equivalence_report


class Command(ZooCommand):
    help = (
        "Imprime o grafo de equivalência (arestas e equivalências de "
        "cadeia) do zoológico.\n"
        "Uso: python manage.py equiv --zoo config/testbed/zoo.json"
    )

    def run(self, **options):
        self.emit(equivalence_report(self.load(options)), options['out'])
