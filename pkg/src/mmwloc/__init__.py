# mmwloc 主包
__version__ = "0.1.0"
