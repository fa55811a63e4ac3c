"""
Exceções de geração e reprodução de carga.
"""
from utils.commons.exceptions import SimulacaoException


class WorkloadException(SimulacaoException):
    """
    Exceção base para erros de carga de trabalho.
    """

    exit_code = 2


class EmptyWorkloadError(WorkloadException):
    """
    Especificação sem aplicações ou traço sem eventos válidos.
    """

    def __init__(self, motivo):
        super().__init__(
            message=f"Carga vazia: {motivo}",
            error_code="CARGA_VAZIA",
            details={'motivo': motivo}
        )


class MalformedTraceError(WorkloadException):
    """
    Linhas mal formadas acima da tolerância no arquivo de traço.
    """

    def __init__(self, path, lines, total):
        super().__init__(
            message=(
                f"{path}: {len(lines)} de {total} linhas mal formadas "
                f"(linhas {', '.join(str(n) for n in lines[:20])})"
            ),
            error_code="TRACO_MAL_FORMADO",
            details={'arquivo': str(path), 'linhas': lines, 'total': total}
        )
