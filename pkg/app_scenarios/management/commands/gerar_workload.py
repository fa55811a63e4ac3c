from app_scenarios.management.commands._base import SimulationCommand
from app_scenarios.services import (build_catalog, build_workload, build_zoo,
                                    load_scenario)
from app_workload.services import export_arrivals, workload_digest


class Command(SimulationCommand):
    help = (
        "Gera a carga do cenário e exporta as chegadas para reuso em "
        "outras execuções.\n"
        "Uso: python manage.py gerar_workload --config "
        "config/testbed/scenario.json --out chegadas.csv [--seed 7]"
    )

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True,
                            help='Documento de cenário.')
        parser.add_argument('--out', required=True,
                            help='Arquivo CSV de chegadas.')
        parser.add_argument('--seed', type=int, default=None,
                            help='Semente; sobrepõe a do cenário.')

    def run(self, **options):
        scenario = load_scenario(options['config'], seed=options['seed'])
        catalog = build_catalog(build_zoo(scenario), scenario.mode)
        arrivals = build_workload(scenario, catalog)
        path = export_arrivals(arrivals, options['out'])
        self.stdout.write(self.style.SUCCESS(
            f"{len(arrivals)} chegadas em {path} "
            f"(digest {workload_digest(arrivals)[:12]})"
        ))
