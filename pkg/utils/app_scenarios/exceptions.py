"""
Exceções do executor de cenários e da comparação de relatórios.
"""
from utils.commons.exceptions import SimulacaoException


class ScenarioException(SimulacaoException):
    """
    Exceção base para erros do executor de cenários.
    """

    exit_code = 2


class DigestMismatchError(ScenarioException):
    """
    Relatórios gerados com cargas diferentes não são comparáveis.
    """

    def __init__(self, reference, other, expected, found):
        super().__init__(
            message=(
                f"Relatórios incomparáveis: {other} usa a carga {found[:12]} "
                f"e {reference} usa {expected[:12]}"
            ),
            error_code="DIGEST_DIVERGENTE",
            details={
                'referencia': reference,
                'relatorio': other,
                'esperado': expected,
                'encontrado': found,
            }
        )


class NotEnoughReportsError(ScenarioException):
    """
    A comparação precisa de ao menos dois relatórios.
    """

    def __init__(self, count):
        super().__init__(
            message=f"Comparação exige ao menos 2 relatórios ({count} dados)",
            error_code="RELATORIOS_INSUFICIENTES",
            details={'quantidade': count}
        )


class InvalidReportError(ScenarioException):
    """
    Arquivo de relatório sem os campos usados na comparação.
    """

    def __init__(self, path, campo):
        super().__init__(
            message=f"Relatório {path} sem o campo '{campo}'",
            error_code="RELATORIO_INVALIDO",
            details={'relatorio': str(path), 'campo': campo}
        )
