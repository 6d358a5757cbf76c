# 开发模块初始化文件：测试套件与测试规模配置
__version__ = "1.0.0"
__description__ = "heightmap-eds 测试与开发环境"
