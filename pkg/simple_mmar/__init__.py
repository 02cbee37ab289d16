from .errors import *  # noqa: F401,F403

__author__ = """simple_mmar developers"""
__email__ = ''
__version__ = '0.1.0'
