"""
JSON Schema do documento zoo.json (descrição compacta de modelos).
"""

_SLOT = {'type': 'string'}

ZOO_SCHEMA = {
    'type': 'object',
    'required': ['foundations'],
    'properties': {
        'schema_version': {'type': 'integer'},
        'threshold': {'type': 'number', 'minimum': -1, 'maximum': 1},
        'signatures_dir': {'type': 'string'},
        'group_override': {
            'type': 'object',
            'additionalProperties': {'type': 'integer', 'minimum': 1},
        },
        'foundations': {
            'type': 'array',
            'minItems': 1,
            'items': {
                'type': 'object',
                'required': ['id', 'layers', 'embed_dim', 'bytes'],
                'properties': {
                    'id': {'type': 'string', 'minLength': 1},
                    'layers': {'type': 'integer', 'minimum': 1},
                    'embed_dim': {'type': 'integer', 'minimum': 1},
                    'serves_app': {'type': 'boolean'},
                    'bytes': {
                        'type': 'object',
                        'required': ['embedding', 'attention', 'ffn',
                                     'lm_head'],
                        'additionalProperties': {
                            'type': 'integer', 'minimum': 0
                        },
                    },
                },
            },
        },
        'models': {
            'type': 'array',
            'items': {
                'type': 'object',
                'required': ['id', 'foundation', 'tuning_kind'],
                'properties': {
                    'id': {'type': 'string', 'minLength': 1},
                    'foundation': {'type': 'string'},
                    'tuning_kind': {
                        'enum': ['full-parameter', 'lora', 'adapter',
                                 'prefix', 'bitfit', 'prompt'],
                    },
                    'serves_app': {'type': 'boolean'},
                    'quality': {'type': 'number', 'minimum': 0,
                                'maximum': 1},
                    'adapters': {
                        'type': 'array',
                        'items': {
                            'type': 'object',
                            'required': ['slot', 'param_bytes'],
                            'properties': {
                                'layer': {'type': 'integer', 'minimum': 0},
                                'slot': _SLOT,
                                'mode': {'enum': ['parallel', 'serial']},
                                'param_bytes': {
                                    'type': 'integer', 'minimum': 0
                                },
                            },
                        },
                    },
                    'modified': {
                        'type': 'array',
                        'items': {
                            'type': 'object',
                            'required': ['slot'],
                            'properties': {
                                'layer': {'type': 'integer', 'minimum': 0},
                                'slot': _SLOT,
                            },
                        },
                    },
                },
            },
        },
        'cross_equivalence': {
            'type': 'array',
            'items': {
                'type': 'array', 'minItems': 2, 'maxItems': 2,
                'items': {'type': 'string'},
            },
        },
        'stitches': {
            'type': 'array',
            'items': {
                'type': 'object',
                'required': ['dim_in', 'dim_out'],
                'properties': {
                    'dim_in': {'type': 'integer', 'minimum': 1},
                    'dim_out': {'type': 'integer', 'minimum': 1},
                    'quality': {'type': 'number', 'minimum': 0,
                                'maximum': 1},
                },
            },
        },
    },
}
