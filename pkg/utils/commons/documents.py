"""
Leitura de documentos de configuração e de dados (JSON ou YAML).

Documentos podem declarar `include`: lista de arquivos mesclados em ordem
antes do próprio documento (chaves posteriores vencem). Caminhos relativos
são resolvidos a partir do arquivo que os inclui.
"""
import copy
import json
import logging
from pathlib import Path

import yaml
from jsonschema import Draft202012Validator

from utils.commons.exceptions import ConfigError, SchemaViolationError

logger = logging.getLogger(__name__)

SUPPORTED_SCHEMA_VERSIONS = (1,)


def read_file(path):
    """
    Lê um arquivo JSON ou YAML sem processar `include`.

    Raises:
        ConfigError: arquivo inexistente ou sintaxe inválida
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(
            f"Arquivo não encontrado: {path}",
            errors={'arquivo': str(path)},
        )
    text = path.read_text(encoding='utf-8')
    try:
        if path.suffix in ('.yaml', '.yml'):
            data = yaml.safe_load(text)
        else:
            data = json.loads(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(
            f"Documento ilegível: {path}",
            errors={'arquivo': str(exc)},
        ) from exc
    return {} if data is None else data


def deep_merge(base, override):
    """Mescla dicionários recursivamente; `override` vence."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_document(path, _stack=None):
    """
    Carrega um documento resolvendo `include` recursivamente.

    Args:
        path: Caminho do documento

    Returns:
        dict: Documento mesclado, com `_base_dir` apontando para a pasta
        do arquivo principal.

    Raises:
        ConfigError: inclusão cíclica, versão de schema desconhecida
    """
    path = Path(path).resolve()
    stack = list(_stack or [])
    if path in stack:
        raise ConfigError(
            f"Inclusão cíclica: {path}",
            errors={'include': str(path)},
        )
    stack.append(path)

    data = read_file(path)
    if not isinstance(data, dict):
        raise ConfigError(
            f"O documento {path} deve ser um objeto.",
            errors={'<raiz>': 'esperado um objeto'},
        )

    merged = {}
    for include in data.get('include', []) or []:
        included = load_document(path.parent / include, stack)
        included.pop('_base_dir', None)
        merged = deep_merge(merged, included)

    own = {k: v for k, v in data.items() if k != 'include'}
    merged = deep_merge(merged, own)

    version = merged.get('schema_version', 1)
    if version not in SUPPORTED_SCHEMA_VERSIONS:
        raise ConfigError(
            f"schema_version {version} não suportada.",
            errors={'schema_version': str(version)},
        )
    merged['_base_dir'] = str(path.parent)
    return merged


def resolve_section(value, base_dir):
    """
    Uma seção pode ser um objeto inline ou o caminho de outro arquivo.

    Returns:
        tuple: (dados, pasta base para caminhos internos da seção)
    """
    if isinstance(value, str):
        section_path = (Path(base_dir) / value).resolve()
        data = load_document(section_path)
        section_dir = data.pop('_base_dir')
        return data, section_dir
    return value, base_dir


def validate_document(data, schema, document_name):
    """
    Valida um documento contra um JSON Schema.

    Raises:
        SchemaViolationError: primeira violação (ordem determinística),
        com caminho e campo.
    """
    validator = Draft202012Validator(schema)
    errors = sorted(
        validator.iter_errors(data),
        key=lambda e: [str(p) for p in e.absolute_path],
    )
    if errors:
        first = errors[0]
        path = '.'.join(str(p) for p in first.absolute_path)
        logger.debug(
            "%s: %d violação(ões) de schema", document_name, len(errors)
        )
        raise SchemaViolationError(document_name, path, first.message)
    return data
