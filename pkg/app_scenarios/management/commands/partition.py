from app_scenarios.management.commands._zoo import ZooCommand
from app_scenarios.services import partition_report


class Command(ZooCommand):
    help = (
        "Particiona o zoológico e imprime blocos e cadeias por modelo.\n"
        "Uso: python manage.py partition --zoo config/testbed/zoo.json"
    )

    def run(self, **options):
        self.emit(partition_report(self.load(options)), options['out'])
