"""
UP-VLA: единая модель понимания, предсказания будущего кадра и действий
"""

__version__ = "0.1.0"
