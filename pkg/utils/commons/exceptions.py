"""
Exceções compartilhadas por todos os apps do
simulador. Cada app define suas exceções específicas em
utils/<app>/exceptions.py herdando de SimulacaoException.
"""


class SimulacaoException(Exception):
    """
    Exceção base do simulador.
    Carrega uma mensagem legível, um código estável e detalhes opcionais.
    """

    exit_code = 1

    def __init__(self, message, error_code=None, details=None):
        self.message = message
        self.error_code = error_code
        self.details = details
        super().__init__(self.message)


class ConfigError(SimulacaoException):
    """
    Erro de configuração (arquivo ausente, documento inválido, opções
    conflitantes). Encerra os comandos com código de saída 2.
    """

    exit_code = 2

    def __init__(self, message, errors=None, details=None):
        super().__init__(
            message=message,
            error_code="CONFIG_INVALIDA",
            details=details,
        )
        self.errors = errors or {}


class SchemaViolationError(ConfigError):
    """
    Documento de dados que não respeita o schema declarado.
    """

    def __init__(self, document, path, message):
        campo = path or '<raiz>'
        super().__init__(
            message=f"{document}: {campo}: {message}",
            errors={campo: message},
            details={'documento': document, 'caminho': campo},
        )
        self.document = document
        self.path = campo
