from app_scenarios.management.commands._zoo import ZooCommand


class Command(ZooCommand):
    help = (
        "Relatório de redundância de parâmetros entre os modelos servidos.\n"
        "Uso: python manage.py redundancy --zoo config/testbed/zoo.json "
        "[--models m1,m2]"
    )

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--models', default=None,
                            help='Ids separados por vírgula.')

    def run(self, **options):
        zoo = self.load(options)
        models = None
        if options['models']:
            models = [m.strip() for m in options['models'].split(',')
                      if m.strip()]
        self.emit(zoo.redundancy_report(models), options['out'])
