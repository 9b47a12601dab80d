from .db_handler import RunRegistry

__all__ = ['RunRegistry']
